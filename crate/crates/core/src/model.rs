//! The attentive region classifier: backbone, embeddings, attention and a
//! three-layer head, trained end to end with cross-entropy.

use std::path::Path;

use log::info;
use ndarray::Array2;
use pod_nn::{init, Adam, AdamConfig, Checkpoint, ParamSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::Detection;
use crate::attention::{attention_forward, init_attention, AttentionConfig};
use crate::classes::ClassVocab;
use crate::embedding::{embed_forward, init_embedding, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::features::{backbone_forward, init_backbone, value_vectors, FeatureConfig};
use crate::regions::{Batch, RegionPage};

const HEAD_LAYERS: [&str; 3] = ["classifier.fc1", "classifier.fc2", "classifier.fc3"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    /// Dropout after each hidden layer, training only.
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden1: 256,
            hidden2: 128,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub embedding: EmbeddingConfig,
    pub attention: AttentionConfig,
    pub classifier: ClassifierConfig,
    pub classes: ClassVocab,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.embedding.validate()?;
        self.attention.validate()?;
        if self.features.value_dim() != self.embedding.d_k {
            return Err(Error::Config(format!(
                "value vector width {} must equal embedding.d_k {}",
                self.features.value_dim(),
                self.embedding.d_k
            )));
        }
        if !(0.0..1.0).contains(&self.classifier.dropout) {
            return Err(Error::Config(format!(
                "classifier.dropout must be in [0, 1), got {}",
                self.classifier.dropout
            )));
        }
        if self.classifier.hidden1 == 0 || self.classifier.hidden2 == 0 {
            return Err(Error::Config(
                "classifier hidden widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_input(&self) -> usize {
        self.features.value_dim() * (1 + self.attention.heads)
    }
}

fn weight(layer: &str) -> String {
    format!("{layer}.weight")
}

fn bias(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Fresh parameters for every component.
pub fn init_model<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_backbone(&mut params, rng);
    init_embedding(&mut params, cfg.features.map_len(), &cfg.embedding, rng);
    init_attention(&mut params, cfg.embedding.d_k, &cfg.attention, rng);
    let dims = [
        cfg.head_input(),
        cfg.classifier.hidden1,
        cfg.classifier.hidden2,
        cfg.classes.len(),
    ];
    for (i, layer) in HEAD_LAYERS.iter().enumerate() {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let w = if i + 1 < HEAD_LAYERS.len() {
            init::he_normal(&[fan_in, fan_out], fan_in, rng)
        } else {
            init::lecun_normal(&[fan_in, fan_out], fan_in, rng)
        };
        params.insert(weight(layer), w);
        params.insert(bias(layer), init::zeros(&[fan_out]));
    }
    Ok(params)
}

/// Whether the classifier sees the attended neighbor context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    #[default]
    Attention,
    /// The context block is replaced by zeros.
    Zeroed,
}

/// Class logits for every region of a batch, `[n, classes]`.
/// Dropout is active only when `dropout_rng` is supplied.
pub fn forward_logits<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &Batch,
    context: ContextMode,
    mut dropout_rng: Option<&mut R>,
) -> Result<Var> {
    let x = tape.leaf(batch.patches.clone());
    let maps = backbone_forward(tape, params, x, &cfg.features)?;
    let values = value_vectors(tape, maps, &cfg.features)?;
    let ctx = match context {
        ContextMode::Attention => {
            let e = embed_forward(tape, params, maps)?;
            attention_forward(tape, params, e, values, &batch.mask, &cfg.attention)?
        }
        ContextMode::Zeroed => tape.leaf(Array2::zeros((
            batch.len(),
            cfg.attention.heads * cfg.features.value_dim(),
        ))),
    };
    let mut h = tape.concat_cols(&[values, ctx])?;
    for (i, layer) in HEAD_LAYERS.iter().enumerate() {
        let w = tape.param(params, &weight(layer))?;
        let b = tape.param(params, &bias(layer))?;
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i + 1 < HEAD_LAYERS.len() {
            h = tape.relu(h);
            h = tape.dropout(h, cfg.classifier.dropout, dropout_rng.as_deref_mut())?;
        }
    }
    Ok(h)
}

fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = pod_nn::softmax(row.as_slice().expect("standard layout"))?;
        row.assign(&ndarray::ArrayView1::from(&p));
    }
    Ok(out)
}

/// Class distributions for every region of a page, inference mode.
pub fn classify_page(
    page: &RegionPage,
    params: &ParamSet,
    cfg: &ModelConfig,
    context: ContextMode,
) -> Result<Array2<f64>> {
    if page.is_empty() {
        return Ok(Array2::zeros((0, cfg.classes.len())));
    }
    let batch = Batch::new(&[page]);
    let mut tape = Tape::new();
    let logits =
        forward_logits::<rand_chacha::ChaCha8Rng>(&mut tape, params, cfg, &batch, context, None)?;
    softmax_rows(tape.value(logits))
}

/// Class distribution for one warped target region given its neighbors' patches.
pub fn classify(
    target: &[f64],
    neighbors: &[Vec<f64>],
    params: &ParamSet,
    cfg: &ModelConfig,
    context: ContextMode,
) -> Result<Vec<f64>> {
    let n = neighbors.len() + 1;
    let width = cfg.features.patch_len();
    let mut patches = Array2::zeros((n, width));
    for (i, p) in std::iter::once(target)
        .chain(neighbors.iter().map(Vec::as_slice))
        .enumerate()
    {
        if p.len() != width {
            return Err(Error::DimensionMismatch(format!(
                "patch has {} values, expected {width}",
                p.len()
            )));
        }
        patches.row_mut(i).assign(&ndarray::ArrayView1::from(p));
    }
    let mut mask = Array2::from_elem((n, n), false);
    for j in 1..n {
        mask[[0, j]] = true;
        mask[[j, 0]] = true;
    }
    let batch = Batch {
        patches,
        mask,
        offsets: vec![0],
    };
    let mut tape = Tape::new();
    let logits =
        forward_logits::<rand_chacha::ChaCha8Rng>(&mut tape, params, cfg, &batch, context, None)?;
    let probs = softmax_rows(tape.value(logits))?;
    Ok(probs.row(0).to_vec())
}

/// Mean cross-entropy over the labeled regions of `pages`, or `None` when no
/// region carries a label.
pub fn batch_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    pages: &[&RegionPage],
    context: ContextMode,
    dropout_rng: Option<&mut R>,
) -> Result<Option<Var>> {
    let batch = Batch::new(pages);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (page, &base) in pages.iter().zip(&batch.offsets) {
        for (i, label) in page.labels.iter().enumerate() {
            if let Some(l) = label {
                rows.push(base + i);
                labels.push(*l);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let logits = forward_logits(tape, params, cfg, &batch, context, dropout_rng)?;
    let picked = tape.gather_rows(logits, &rows)?;
    Ok(Some(tape.softmax_cross_entropy(picked, &labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pages per optimizer step.
    pub batch_pages: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub freeze_backbone: bool,
    pub context: ContextMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_pages: 6,
            lr: 3e-4,
            weight_decay: 1e-5,
            freeze_backbone: false,
            context: ContextMode::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

/// Fraction of labeled regions whose argmax class equals the label.
pub fn accuracy(
    pages: &[RegionPage],
    params: &ParamSet,
    cfg: &ModelConfig,
    context: ContextMode,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for page in pages {
        if page.labeled_count() == 0 {
            continue;
        }
        let probs = classify_page(page, params, cfg, context)?;
        for (row, label) in probs.rows().into_iter().zip(&page.labels) {
            if let Some(l) = label {
                hit += usize::from(argmax(row.as_slice().expect("standard layout")) == *l);
                total += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Minimizes mean cross-entropy over the labeled regions with Adam.
pub fn train<R: Rng + ?Sized>(
    pages: &[RegionPage],
    validation: &[RegionPage],
    params: &mut ParamSet,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if pages.iter().all(|p| p.labeled_count() == 0) {
        return Err(Error::EmptyTrainingSet);
    }
    if train_cfg.batch_pages == 0 {
        return Err(Error::Config("train.batch_pages must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: train_cfg.lr,
        weight_decay: train_cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..pages.len()).collect();
    let mut stats = Vec::with_capacity(train_cfg.epochs);
    for epoch in 1..=train_cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(train_cfg.batch_pages) {
            let batch: Vec<&RegionPage> = chunk.iter().map(|&i| &pages[i]).collect();
            let mut tape = Tape::new();
            let Some(loss) = batch_loss(
                &mut tape,
                params,
                cfg,
                &batch,
                train_cfg.context,
                Some(&mut *rng),
            )?
            else {
                continue;
            };
            total += tape.scalar(loss);
            steps += 1;
            let mut grads = tape.backward(loss)?;
            if train_cfg.freeze_backbone {
                grads.retain(|name| !name.starts_with("backbone."));
            }
            adam.step(params, &grads)?;
        }
        let train_accuracy = accuracy(pages, params, cfg, train_cfg.context)?;
        let validation_accuracy = if validation.is_empty() {
            None
        } else {
            Some(accuracy(validation, params, cfg, train_cfg.context)?)
        };
        let s = EpochStats {
            epoch,
            loss: total / steps.max(1) as f64,
            train_accuracy,
            validation_accuracy,
        };
        info!(
            "train epoch {epoch}: loss {:.5}, train acc {:.4}, val acc {}",
            s.loss,
            s.train_accuracy,
            s.validation_accuracy
                .map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        stats.push(s);
    }
    Ok(stats)
}

/// One detection per proposal: argmax class and its probability.
pub fn detect_regions(
    page: &RegionPage,
    params: &ParamSet,
    cfg: &ModelConfig,
    context: ContextMode,
) -> Result<Vec<Detection>> {
    let probs = classify_page(page, params, cfg, context)?;
    Ok(page
        .boxes
        .iter()
        .zip(probs.rows())
        .map(|(b, row)| {
            let row = row.as_slice().expect("standard layout");
            let best = argmax(row);
            Detection {
                bbox: *b,
                class: cfg.classes.name(best).to_string(),
                score: row[best],
            }
        })
        .collect())
}

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrained,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub context: ContextMode,
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let config = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ckpt = Checkpoint::from_params(params, config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    ckpt.save(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::Read {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    meta.model.validate()?;
    Ok((ckpt.to_params()?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_architecture() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_input(), 1024);
        let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(
            params.get("classifier.fc1.weight").unwrap().shape(),
            &[1024, 256]
        );
        assert_eq!(
            params.get("classifier.fc3.weight").unwrap().shape(),
            &[128, 11]
        );
        assert_eq!(
            params.get("attention.head2.key").unwrap().shape(),
            &[64, 256]
        );
        assert_eq!(
            params.get("embedding.fc1.weight").unwrap().shape(),
            &[4096, 512]
        );
        assert_eq!(params.len(), 4 + 4 + 6 + 6);
    }

    #[test]
    fn classify_is_a_distribution() {
        let cfg = ModelConfig::default();
        let params = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch: Vec<f64> = (0..cfg.features.patch_len())
            .map(|_| rng.random())
            .collect();
        let alone = classify(&patch, &[], &params, &cfg, ContextMode::Attention).unwrap();
        assert_eq!(alone.len(), 11);
        assert!((alone.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let with = classify(
            &patch,
            std::slice::from_ref(&patch),
            &params,
            &cfg,
            ContextMode::Attention,
        )
        .unwrap();
        assert!((with.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let zeroed = classify(&patch, &[], &params, &cfg, ContextMode::Zeroed).unwrap();
        assert_eq!(alone, zeroed);
        let again = classify(
            &patch,
            std::slice::from_ref(&patch),
            &params,
            &cfg,
            ContextMode::Attention,
        )
        .unwrap();
        assert_eq!(with, again);
    }
}
