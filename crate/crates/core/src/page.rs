//! Page rasters, binarization and margin balancing.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// 8-bit grayscale page, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayPage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl GrayPage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidPage(format!("empty page {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::InvalidPage(format!(
                "{} pixels for a {width}x{height} page",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.pixels[y as usize * self.width as usize + x as usize] = v;
    }

    /// Paints a filled rectangle, clipped to the page.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, v: u8) {
        for y in y0..y1.min(self.height) {
            let row = y as usize * self.width as usize;
            for x in x0..x1.min(self.width) {
                self.pixels[row + x as usize] = v;
            }
        }
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height).expect("non-empty page")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::GrayImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Write {
                path: path.to_path_buf(),
                source: std::io::Error::other(e),
            })
    }

    /// Writes a binary (P5) PGM.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend_from_slice(&self.pixels);
        fs::write(path, out).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Integer luma, `(299 R + 587 G + 114 B) / 1000`.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b)) / 1000) as u8
}

/// Reads an 8-bit PNG (gray or RGB, alpha ignored) or a PGM.
pub fn load_page(path: &Path) -> Result<GrayPage> {
    let reader = ImageReader::open(path)
        .map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width(), img.height());
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        DynamicImage::ImageRgb8(buf) => {
            buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
        DynamicImage::ImageRgba8(buf) => {
            buf.pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect()
        }
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                message: format!("{:?} is not 8-bit gray or RGB", other.color()),
            })
        }
    };
    GrayPage::new(w, h, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMode {
    #[default]
    Fixed,
    Otsu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinarizeConfig {
    pub mode: BinarizeMode,
    /// Foreground iff luminance < threshold (fixed mode).
    pub threshold: u8,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self {
            mode: BinarizeMode::Fixed,
            threshold: 128,
        }
    }
}

/// Foreground/background raster. `origin` is the offset of this map's
/// top-left pixel in the source page, nonzero after margins were trimmed
/// from the left or top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryPageMap {
    width: u32,
    height: u32,
    origin: (u32, u32),
    source_size: (u32, u32),
    fg: Vec<bool>,
}

impl BinaryPageMap {
    pub fn new(width: u32, height: u32, fg: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || fg.len() != width as usize * height as usize {
            return Err(Error::InvalidPage(format!(
                "{} cells for a {width}x{height} map",
                fg.len()
            )));
        }
        Ok(Self {
            width,
            height,
            origin: (0, 0),
            source_size: (width, height),
            fg,
        })
    }

    /// Builds a map from ASCII art: `#` is foreground, anything else background.
    pub fn from_rows(rows: &[&str]) -> Result<Self> {
        let height = rows.len() as u32;
        let width = rows.first().map_or(0, |r| r.len()) as u32;
        if rows.iter().any(|r| r.len() as u32 != width) {
            return Err(Error::InvalidPage("ragged rows".into()));
        }
        let fg = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| b == b'#'))
            .collect();
        Self::new(width, height, fg)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn origin(&self) -> (u32, u32) {
        self.origin
    }

    /// Dimensions of the page this map was derived from.
    pub fn source_size(&self) -> (u32, u32) {
        self.source_size
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height).expect("non-empty map")
    }

    #[inline]
    pub fn is_fg(&self, x: u32, y: u32) -> bool {
        self.fg[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.fg[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count_fg(&self) -> usize {
        self.fg.iter().filter(|&&v| v).count()
    }

    /// Tight box around all foreground pixels inside `region`.
    pub fn ink_extent(&self, region: &BBox) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in region.y0()..region.y1() {
            for x in region.x0()..region.x1() {
                if self.is_fg(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        BBox::new(x0, y0, x1, y1).ok()
    }

    /// The `{0, 255}` page this map induces (foreground black).
    pub fn to_gray(&self) -> GrayPage {
        let pixels = self.fg.iter().map(|&f| if f { 0 } else { 255 }).collect();
        GrayPage::new(self.width, self.height, pixels).expect("same dimensions")
    }

    fn crop(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut fg = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
        for y in y0..y1 {
            let row = y as usize * self.width as usize;
            fg.extend_from_slice(&self.fg[row + x0 as usize..row + x1 as usize]);
        }
        Self {
            width: x1 - x0,
            height: y1 - y0,
            origin: (self.origin.0 + x0, self.origin.1 + y0),
            source_size: self.source_size,
            fg,
        }
    }
}

/// Otsu's threshold: the value `t` maximizing between-class variance when
/// pixels `< t` form one class. Returns 128 for constant pages.
pub fn otsu_threshold(page: &GrayPage) -> u8 {
    let mut hist = [0u64; 256];
    for &p in page.pixels() {
        hist[p as usize] += 1;
    }
    let total = page.pixels().len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w_below, mut sum_below) = (0.0, 0.0);
    let (mut best_t, mut best_var) = (128u8, -1.0);
    // t is the first value assigned to the upper class
    for t in 1..256usize {
        w_below += hist[t - 1] as f64;
        sum_below += (t - 1) as f64 * hist[t - 1] as f64;
        let w_above = total - w_below;
        if w_below == 0.0 || w_above == 0.0 {
            continue;
        }
        let mean_below = sum_below / w_below;
        let mean_above = (sum_all - sum_below) / w_above;
        let var = w_below * w_above * (mean_below - mean_above).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

/// Foreground iff luminance is below the configured (or Otsu) threshold.
pub fn binarize(page: &GrayPage, cfg: &BinarizeConfig) -> BinaryPageMap {
    let threshold = match cfg.mode {
        BinarizeMode::Fixed => cfg.threshold,
        BinarizeMode::Otsu => otsu_threshold(page),
    };
    let fg = page.pixels().iter().map(|&p| p < threshold).collect();
    BinaryPageMap::new(page.width(), page.height(), fg).expect("same dimensions")
}

/// Equalizes the blank margins on opposite sides by trimming the wider one.
///
/// Horizontal and vertical axes are handled independently. A map without
/// foreground is returned unchanged.
pub fn balance_margins(m: &BinaryPageMap) -> BinaryPageMap {
    let Some(ink) = m.ink_extent(&m.bounds()) else {
        return m.clone();
    };
    let (left, right) = (ink.x0(), m.width() - ink.x1());
    let (top, bottom) = (ink.y0(), m.height() - ink.y1());
    let (x0, x1) = if left < right {
        (0, m.width() - (right - left))
    } else {
        (left - right, m.width())
    };
    let (y0, y1) = if top < bottom {
        (0, m.height() - (bottom - top))
    } else {
        (top - bottom, m.height())
    };
    m.crop(x0, y0, x1, y1)
}
