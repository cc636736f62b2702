//! Crop-and-warp of proposal sub-images and the small convolutional extractor.
//!
//! The extractor is two 3×3 stride-2 convolutions (1→8 and 8→16 channels,
//! zero padding 1), each followed by ReLU. A 64×64 warp therefore yields a
//! 16×16×16 map. The value vector fed to attention is that map average-pooled
//! over a 4×4 grid per channel.

use ndarray::Array2;
use pod_nn::{init, ConvGeom, ParamSet, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::page::GrayPage;

pub const CONV1_CHANNELS: usize = 8;
pub const CONV2_CHANNELS: usize = 16;
const KERNEL: usize = 3;

pub const CONV1_WEIGHT: &str = "backbone.conv1.weight";
pub const CONV1_BIAS: &str = "backbone.conv1.bias";
pub const CONV2_WEIGHT: &str = "backbone.conv2.weight";
pub const CONV2_BIAS: &str = "backbone.conv2.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Side of the square warp, pixels.
    pub warp_size: usize,
    /// Pooling grid side for the value vector.
    pub value_grid: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            warp_size: 64,
            value_grid: 4,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warp_size < 16 || !self.warp_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "features.warp_size must be a multiple of 4 and at least 16, got {}",
                self.warp_size
            )));
        }
        if self.value_grid == 0 || self.value_grid > self.map_side() {
            return Err(Error::Config(format!(
                "features.value_grid must be in 1..={}, got {}",
                self.map_side(),
                self.value_grid
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.warp_size * self.warp_size
    }

    fn conv1(&self) -> ConvGeom {
        ConvGeom {
            in_channels: 1,
            in_h: self.warp_size,
            in_w: self.warp_size,
            out_channels: CONV1_CHANNELS,
            kernel: KERNEL,
            stride: 2,
            pad: 1,
        }
    }

    fn conv2(&self) -> ConvGeom {
        let side = self.conv1().out_h();
        ConvGeom {
            in_channels: CONV1_CHANNELS,
            in_h: side,
            in_w: side,
            out_channels: CONV2_CHANNELS,
            kernel: KERNEL,
            stride: 2,
            pad: 1,
        }
    }

    /// Side of the final conv map.
    pub fn map_side(&self) -> usize {
        self.conv2().out_h()
    }

    /// Length of a flattened conv map.
    pub fn map_len(&self) -> usize {
        self.conv2().out_len()
    }

    /// Length of the pooled value vector.
    pub fn value_dim(&self) -> usize {
        CONV2_CHANNELS * self.value_grid * self.value_grid
    }
}

/// Channel-major `[channels, h, w]` activations of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMap {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
    pub source: Option<BBox>,
}

/// Bilinear resampling with aligned corners: output sample `j` reads source
/// position `j·(w−1)/(out_w−1)`, so the four corners map exactly.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), w * h, "source buffer size");
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|j| {
                if n_in == 1 || n_out == 1 {
                    return (0, 0, 0.0);
                }
                let pos = j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
                let lo = (pos.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let xs = coords(out_w, w);
    let ys = coords(out_h, h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Crops `b` from the page and warps it to `size × size` as ink density
/// `1 − luminance/255`, so white paper is 0 and black ink is 1.
pub fn crop_warp(page: &GrayPage, b: &BBox, size: usize) -> Result<Vec<f64>> {
    if b.x1() > page.width() || b.y1() > page.height() {
        return Err(Error::DimensionMismatch(format!(
            "box {b} outside {}×{} page",
            page.width(),
            page.height()
        )));
    }
    let mut crop = Vec::with_capacity(b.area() as usize);
    for y in b.y0()..b.y1() {
        for x in b.x0()..b.x1() {
            crop.push(1.0 - f64::from(page.get(x, y)) / 255.0);
        }
    }
    Ok(resize_bilinear(
        &crop,
        b.width() as usize,
        b.height() as usize,
        size,
        size,
    ))
}

/// Warps every box of a page into one row per region.
pub fn warp_regions(page: &GrayPage, boxes: &[BBox], cfg: &FeatureConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((boxes.len(), cfg.patch_len()));
    for (mut row, b) in out.rows_mut().into_iter().zip(boxes) {
        let patch = crop_warp(page, b, cfg.warp_size)?;
        row.assign(&ndarray::ArrayView1::from(&patch));
    }
    Ok(out)
}

pub fn init_backbone<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R) {
    params.insert(
        CONV1_WEIGHT,
        init::he_normal(&[CONV1_CHANNELS, 1, KERNEL, KERNEL], KERNEL * KERNEL, rng),
    );
    params.insert(CONV1_BIAS, init::zeros(&[CONV1_CHANNELS]));
    params.insert(
        CONV2_WEIGHT,
        init::he_normal(
            &[CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL],
            CONV1_CHANNELS * KERNEL * KERNEL,
            rng,
        ),
    );
    params.insert(CONV2_BIAS, init::zeros(&[CONV2_CHANNELS]));
}

/// Records the extractor on `tape`; `patches` holds one warped region per row.
/// Returns the flattened conv maps, one row per region.
pub fn backbone_forward(
    tape: &mut Tape,
    params: &ParamSet,
    patches: Var,
    cfg: &FeatureConfig,
) -> Result<Var> {
    let w1 = tape.param(params, CONV1_WEIGHT)?;
    let b1 = tape.param(params, CONV1_BIAS)?;
    let w2 = tape.param(params, CONV2_WEIGHT)?;
    let b2 = tape.param(params, CONV2_BIAS)?;
    let h1 = tape.conv2d(patches, w1, b1, cfg.conv1())?;
    let h1 = tape.relu(h1);
    let h2 = tape.conv2d(h1, w2, b2, cfg.conv2())?;
    Ok(tape.relu(h2))
}

/// Pooled value vectors from flattened conv maps.
pub fn value_vectors(tape: &mut Tape, maps: Var, cfg: &FeatureConfig) -> Result<Var> {
    let side = cfg.map_side();
    Ok(tape.avg_pool_grid(maps, CONV2_CHANNELS, side, side, cfg.value_grid)?)
}

/// Conv map of a single warped patch.
pub fn extract(patch: &[f64], params: &ParamSet, cfg: &FeatureConfig) -> Result<ConvMap> {
    if patch.len() != cfg.patch_len() {
        return Err(Error::DimensionMismatch(format!(
            "patch has {} values, expected {}",
            patch.len(),
            cfg.patch_len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Array2::from_shape_vec((1, patch.len()), patch.to_vec()).expect("one row"));
    let maps = backbone_forward(&mut tape, params, x, cfg)?;
    let side = cfg.map_side();
    Ok(ConvMap {
        channels: CONV2_CHANNELS,
        h: side,
        w: side,
        data: tape.value(maps).iter().copied().collect(),
        source: None,
    })
}

/// Per-channel averages over a `grid × grid` partition, channel-major.
pub fn value_vector(map: &ConvMap, grid: usize) -> Result<Vec<f64>> {
    if map.data.len() != map.channels * map.h * map.w {
        return Err(Error::DimensionMismatch("conv map buffer".into()));
    }
    let mut tape = Tape::new();
    let x =
        tape.leaf(Array2::from_shape_vec((1, map.data.len()), map.data.clone()).expect("one row"));
    let v = tape.avg_pool_grid(x, map.channels, map.h, map.w, grid)?;
    Ok(tape.value(v).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn dimensions() {
        let cfg = FeatureConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.map_side(), 16);
        assert_eq!(cfg.map_len(), 4096);
        assert_eq!(cfg.value_dim(), 256);
        assert!(FeatureConfig {
            warp_size: 8,
            value_grid: 4
        }
        .validate()
        .is_err());
    }

    #[test]
    fn constant_region_warps_to_constant() {
        let page = GrayPage::filled(30, 20, 51).unwrap();
        let p = crop_warp(&page, &bb(3, 4, 17, 9), 16).unwrap();
        assert!(p.iter().all(|&v| (v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn identity_warp_copies() {
        let px: Vec<u8> = (0..64).map(|i| (i * 4) as u8).collect();
        let page = GrayPage::new(8, 8, px.clone()).unwrap();
        let p = crop_warp(&page, &bb(0, 0, 8, 8), 8).unwrap();
        for (a, b) in p.iter().zip(&px) {
            assert_eq!(*a, 1.0 - f64::from(*b) / 255.0);
        }
    }

    #[test]
    fn checkerboard_upsample() {
        let page = GrayPage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let p = crop_warp(&page, &bb(0, 0, 2, 2), 4).unwrap();
        // ink densities [1, 0, 0, 1]
        // sample (1/3, 1/3): weights (2/3·2/3)·1 + (1/3·2/3)·0 + (2/3·1/3)·0 + (1/3·1/3)·1
        assert!((p[5] - 5.0 / 9.0).abs() < 1e-15);
        // sample (2/3, 1/3): (1/3·2/3)·1 + (2/3·2/3)·0 + (1/3·1/3)·0 + (2/3·1/3)·1
        assert!((p[6] - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn zero_patch_zero_bias_gives_zero_map() {
        let cfg = FeatureConfig::default();
        let mut params = ParamSet::new();
        init_backbone(&mut params, &mut ChaCha8Rng::seed_from_u64(1));
        let map = extract(&vec![0.0; cfg.patch_len()], &params, &cfg).unwrap();
        assert!(map.data.iter().all(|&v| v == 0.0));
        assert!(value_vector(&map, 4).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_vector_of_constant_map() {
        let map = ConvMap {
            channels: 16,
            h: 16,
            w: 16,
            data: vec![0.75; 4096],
            source: None,
        };
        let v = value_vector(&map, 4).unwrap();
        assert_eq!(v.len(), 256);
        assert!(v.iter().all(|&x| x == 0.75));
    }

    proptest! {
        #[test]
        fn ramp_round_trip(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
                           w in 2usize..9, h in 2usize..9, up in 9usize..40) {
            let src: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |x| a * x as f64 + b * y as f64 + c))
                .collect();
            let big = resize_bilinear(&src, w, h, up, up);
            let back = resize_bilinear(&big, up, up, w, h);
            for (x, y) in src.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
