//! Region embeddings and their negative-sampling pretraining.

use log::info;
use ndarray::Array2;
use pod_nn::{init, sigmoid, Adam, AdamConfig, ParamSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{backbone_forward, ConvMap, FeatureConfig};
use crate::neighbors::{sample_pairs, PairSample};
use crate::regions::RegionPage;

pub const FC1_WEIGHT: &str = "embedding.fc1.weight";
pub const FC1_BIAS: &str = "embedding.fc1.bias";
pub const FC2_WEIGHT: &str = "embedding.fc2.weight";
pub const FC2_BIAS: &str = "embedding.fc2.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub hidden: usize,
    pub d_k: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            d_k: 256,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.d_k == 0 {
            return Err(Error::Config(
                "embedding.hidden and embedding.d_k must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn init_embedding<R: Rng + ?Sized>(
    params: &mut ParamSet,
    input_dim: usize,
    cfg: &EmbeddingConfig,
    rng: &mut R,
) {
    params.insert(
        FC1_WEIGHT,
        init::he_normal(&[input_dim, cfg.hidden], input_dim, rng),
    );
    params.insert(FC1_BIAS, init::zeros(&[cfg.hidden]));
    params.insert(
        FC2_WEIGHT,
        init::lecun_normal(&[cfg.hidden, cfg.d_k], cfg.hidden, rng),
    );
    params.insert(FC2_BIAS, init::zeros(&[cfg.d_k]));
}

/// Two dense layers with a ReLU between; `maps` holds one flattened conv map per row.
pub fn embed_forward(tape: &mut Tape, params: &ParamSet, maps: Var) -> Result<Var> {
    let w1 = tape.param(params, FC1_WEIGHT)?;
    let b1 = tape.param(params, FC1_BIAS)?;
    let w2 = tape.param(params, FC2_WEIGHT)?;
    let b2 = tape.param(params, FC2_BIAS)?;
    let h = tape.matmul(maps, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let e = tape.matmul(h, w2)?;
    Ok(tape.add_row(e, b2)?)
}

pub fn embed(map: &ConvMap, params: &ParamSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x =
        tape.leaf(Array2::from_shape_vec((1, map.data.len()), map.data.clone()).expect("one row"));
    let e = embed_forward(&mut tape, params, x)?;
    Ok(tape.value(e).iter().copied().collect())
}

/// Probability that two regions are neighbors: `σ(a·b)`.
pub fn score_pair(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sigmoid(a.iter().zip(b).map(|(x, y)| x * y).sum()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Pages per optimizer step.
    pub batch_pages: usize,
    pub k_neg: usize,
    pub lr: f64,
    /// Cosine decay from `lr` at the first epoch to `lr · lr_floor` at the last.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
}

impl PretrainConfig {
    /// Learning rate used during `epoch` (0-based).
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        if self.epochs < 2 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * c)
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_pages: 1,
            k_neg: 5,
            lr: 2e-4,
            lr_floor: 0.3,
            weight_decay: 1e-5,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean pair loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: Vec<usize>,
}

/// Mean negative-sampling loss of `pairs` over the stacked regions of `pages`.
/// Pair indices are relative to the concatenation of the pages' regions.
pub fn pair_loss(
    tape: &mut Tape,
    params: &ParamSet,
    patches: Array2<f64>,
    pairs: &[PairSample],
    features: &FeatureConfig,
) -> Result<Var> {
    let x = tape.leaf(patches);
    let maps = backbone_forward(tape, params, x, features)?;
    let e = embed_forward(tape, params, maps)?;
    let targets: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    let others: Vec<usize> = pairs.iter().map(|p| p.other).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.positive).collect();
    let t = tape.gather_rows(e, &targets)?;
    let o = tape.gather_rows(e, &others)?;
    let s = tape.row_dot(t, o)?;
    Ok(tape.nce_loss(s, &labels)?)
}

/// Samples pairs for each page and stacks the pages that have any.
fn batch_pairs<R: Rng + ?Sized>(
    pages: &[&RegionPage],
    k_neg: usize,
    rng: &mut R,
) -> (Option<Array2<f64>>, Vec<PairSample>) {
    let mut pairs = Vec::new();
    let mut views = Vec::new();
    let mut base = 0;
    for p in pages {
        let sampled = sample_pairs(&p.graph, k_neg, rng);
        if sampled.is_empty() {
            continue;
        }
        pairs.extend(sampled.into_iter().map(|s| PairSample {
            target: s.target + base,
            other: s.other + base,
            positive: s.positive,
        }));
        views.push(p.patches.view());
        base += p.len();
    }
    let patches = (!views.is_empty())
        .then(|| ndarray::concatenate(ndarray::Axis(0), &views).expect("equal patch widths"));
    (patches, pairs)
}

/// Trains backbone and embedding parameters on neighbor/non-neighbor pairs.
pub fn pretrain<R: Rng + ?Sized>(
    pages: &[RegionPage],
    params: &mut ParamSet,
    features: &FeatureConfig,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if pages.iter().all(|p| p.graph.edge_count() == 0) {
        return Err(Error::NoTrainingPairs);
    }
    if cfg.batch_pages == 0 {
        return Err(Error::Config(
            "pretrain.batch_pages must be positive".into(),
        ));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut report = PretrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        pairs_per_epoch: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..pages.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.set_lr(cfg.epoch_lr(epoch));
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_pages) {
            let batch: Vec<&RegionPage> = chunk.iter().map(|&i| &pages[i]).collect();
            let (patches, pairs) = batch_pairs(&batch, cfg.k_neg, rng);
            let Some(patches) = patches else { continue };
            let mut tape = Tape::new();
            let loss = pair_loss(&mut tape, params, patches, &pairs, features)?;
            total += tape.scalar(loss) * pairs.len() as f64;
            count += pairs.len();
            let mut grads = tape.backward(loss)?;
            if cfg.freeze_backbone {
                grads.retain(|name| !name.starts_with("backbone."));
            }
            adam.step(params, &grads)?;
        }
        let mean = total / count.max(1) as f64;
        info!(
            "pretrain epoch {}: loss {mean:.5} over {count} pairs",
            epoch + 1
        );
        report.epoch_losses.push(mean);
        report.pairs_per_epoch.push(count);
    }
    Ok(report)
}

/// Embeddings for every region of a page, one row per region.
pub fn embed_page(
    page: &RegionPage,
    params: &ParamSet,
    features: &FeatureConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let x = tape.leaf(page.patches.clone());
    let maps = backbone_forward(&mut tape, params, x, features)?;
    let e = embed_forward(&mut tape, params, maps)?;
    Ok(tape.value(e).clone())
}

/// Mean pair probability over positive and over negative samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn score_pairs<R: Rng + ?Sized>(
    pages: &[RegionPage],
    params: &ParamSet,
    features: &FeatureConfig,
    k_neg: usize,
    rng: &mut R,
) -> Result<PairScores> {
    let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
    for page in pages {
        let pairs = sample_pairs(&page.graph, k_neg, rng);
        if pairs.is_empty() {
            continue;
        }
        let e = embed_page(page, params, features)?;
        for p in pairs {
            let s = sigmoid(e.row(p.target).dot(&e.row(p.other)));
            let slot = if p.positive { &mut pos } else { &mut neg };
            slot.0 += s;
            slot.1 += 1;
        }
    }
    Ok(PairScores {
        positive_mean: pos.0 / pos.1.max(1) as f64,
        negative_mean: neg.0 / neg.1.max(1) as f64,
        positives: pos.1,
        negatives: neg.1,
    })
}
