//! Multi-head scaled dot-product attention over neighbor regions.
//!
//! Each head projects the target embedding (query) and neighbor embeddings
//! (keys) to `head_dim`, scores them with `q·k / √head_dim`, and averages the
//! neighbors' unprojected value vectors with the softmax weights. Heads are
//! concatenated. A region without neighbors gets an all-zero context.

use ndarray::Array2;
use pod_nn::{init, ParamSet, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 3,
            head_dim: 64,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "attention.heads and attention.head_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

pub fn query_name(head: usize) -> String {
    format!("attention.head{head}.query")
}

pub fn key_name(head: usize) -> String {
    format!("attention.head{head}.key")
}

pub fn init_attention<R: Rng + ?Sized>(
    params: &mut ParamSet,
    d_k: usize,
    cfg: &AttentionConfig,
    rng: &mut R,
) {
    for h in 0..cfg.heads {
        params.insert(
            query_name(h),
            init::lecun_normal(&[cfg.head_dim, d_k], d_k, rng),
        );
        params.insert(
            key_name(h),
            init::lecun_normal(&[cfg.head_dim, d_k], d_k, rng),
        );
    }
}

/// Context vectors for every row of `embeddings` (`[n, d_k]`), attending over
/// the rows of `values` (`[n, d_v]`) allowed by `mask`. Returns `[n, heads·d_v]`.
pub fn attention_forward(
    tape: &mut Tape,
    params: &ParamSet,
    embeddings: Var,
    values: Var,
    mask: &Array2<bool>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = tape.param(params, &query_name(h))?;
        let wk = tape.param(params, &key_name(h))?;
        let q = tape.matmul_bt(embeddings, wq)?;
        let k = tape.matmul_bt(embeddings, wk)?;
        let logits = tape.matmul_bt(q, k)?;
        let logits = tape.scale(logits, cfg.scale());
        let weights = tape.masked_softmax_rows(logits, mask)?;
        heads.push(tape.matmul(weights, values)?);
    }
    Ok(tape.concat_cols(&heads)?)
}

/// Multi-head attention for one query over `keys`/`values`.
///
/// With no neighbors the result is the zero context, whose width assumes
/// value vectors as wide as the query (`d_v = d_k`).
pub fn attend(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    params: &ParamSet,
    cfg: &AttentionConfig,
) -> Result<Vec<f64>> {
    if keys.len() != values.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} keys but {} values",
            keys.len(),
            values.len()
        )));
    }
    if keys.is_empty() {
        return Ok(empty_context(query.len(), cfg));
    }
    let d_v = values[0].len();
    let d_k = query.len();
    if keys.iter().any(|k| k.len() != d_k) || values.iter().any(|v| v.len() != d_v) {
        return Err(Error::DimensionMismatch("ragged keys or values".into()));
    }
    let m = keys.len();
    let mut e = Array2::zeros((m + 1, d_k));
    e.row_mut(0).assign(&ndarray::ArrayView1::from(query));
    for (i, k) in keys.iter().enumerate() {
        e.row_mut(i + 1)
            .assign(&ndarray::ArrayView1::from(k.as_slice()));
    }
    let mut v = Array2::zeros((m + 1, d_v));
    for (i, val) in values.iter().enumerate() {
        v.row_mut(i + 1)
            .assign(&ndarray::ArrayView1::from(val.as_slice()));
    }
    let mut mask = Array2::from_elem((m + 1, m + 1), false);
    for j in 1..=m {
        mask[[0, j]] = true;
    }
    let mut tape = Tape::new();
    let ev = tape.leaf(e);
    let vv = tape.leaf(v);
    let out = attention_forward(&mut tape, params, ev, vv, &mask, cfg)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// `attend` with no neighbors: the zero context of width `heads·d_v`.
pub fn empty_context(d_v: usize, cfg: &AttentionConfig) -> Vec<f64> {
    vec![0.0; cfg.heads * d_v]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_k: usize, cfg: &AttentionConfig) -> ParamSet {
        let mut params = ParamSet::new();
        init_attention(&mut params, d_k, cfg, &mut ChaCha8Rng::seed_from_u64(3));
        params
    }

    #[test]
    fn single_neighbor_returns_its_value() {
        let cfg = AttentionConfig {
            heads: 2,
            head_dim: 4,
        };
        let params = setup(6, &cfg);
        let v = vec![0.1, -2.5, 3.25];
        let out = attend(
            &[0.3; 6],
            &[vec![1.0; 6]],
            std::slice::from_ref(&v),
            &params,
            &cfg,
        )
        .unwrap();
        assert_eq!(out, [v.clone(), v].concat());
    }

    #[test]
    fn identical_keys_average_values() {
        let cfg = AttentionConfig {
            heads: 3,
            head_dim: 4,
        };
        let params = setup(5, &cfg);
        let k = vec![0.2, -0.1, 0.7, 0.0, 1.0];
        let vals = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![5.0, 3.0]];
        let out = attend(&[1.0; 5], &[k.clone(), k.clone(), k], &vals, &params, &cfg).unwrap();
        for h in 0..3 {
            assert!((out[2 * h] - 3.0).abs() < 1e-12);
            assert!((out[2 * h + 1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_error() {
        let cfg = AttentionConfig::default();
        let params = setup(4, &cfg);
        assert!(attend(&[0.0; 4], &[vec![0.0; 4]], &[], &params, &cfg).is_err());
        assert_eq!(
            attend(&[0.5; 4], &[], &[], &params, &cfg).unwrap(),
            vec![0.0; 12]
        );
    }
}
