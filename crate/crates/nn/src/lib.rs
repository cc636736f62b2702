//! Minimal double-precision neural network stack.
//!
//! Values live in [`Tensor`]s grouped into a named [`ParamSet`]. A forward pass
//! records operations on a [`Tape`]; [`Tape::backward`] walks the tape in
//! reverse and returns per-parameter [`Gradients`]. [`Adam`] consumes those
//! gradients, and [`grad_check`] compares them against central differences.
//!
//! Everything is single-threaded and uses a fixed reduction order, so a given
//! seed reproduces the same bits on the same machine.

mod checkpoint;
mod error;
mod gradcheck;
pub mod init;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_FORMAT_VERSION};
pub use error::NnError;
pub use gradcheck::{grad_check, CoordSelection, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::{ParamSet, Tensor};

/// Numerically stable softmax over a slice.
///
/// Subtracts the maximum before exponentiating. Rejects NaN inputs.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.is_empty() {
        return Err(NnError::Empty("softmax input"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(NnError::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Negative-sampling loss for a single pair of embeddings.
///
/// `-ln σ(a·b)` for a positive pair, `-ln(1 - σ(a·b))` for a negative one.
pub fn nce_loss(a: &[f64], b: &[f64], positive: bool) -> Result<f64, NnError> {
    if a.len() != b.len() {
        return Err(NnError::ShapeMismatch {
            op: "nce_loss",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(if positive {
        softplus(-dot)
    } else {
        softplus(dot)
    })
}

/// Cross-entropy of a probability vector against a class index.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, NnError> {
    let p = probs.get(label).ok_or(NnError::IndexOutOfRange {
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[4.2]).unwrap(), vec![1.0]);
        for p in softmax(&[0.7, 0.7, 0.7]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(NnError::NonFinite(_))
        ));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn nce_loss_examples() {
        let zero = nce_loss(&[1.0, 0.0], &[0.0, 1.0], true).unwrap();
        assert!((zero - 2f64.ln()).abs() < 1e-15);
        let ln3 = 3f64.ln();
        assert!((sigmoid(ln3) - 0.75).abs() < 1e-15);
        let pos = nce_loss(&[ln3], &[1.0], true).unwrap();
        assert!((pos - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        let neg = nce_loss(&[ln3], &[1.0], false).unwrap();
        assert!((neg - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_of_correct_one_hot_is_zero() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!(cross_entropy(&[1.0], 3).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..20),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn nce_loss_is_nonnegative_and_ln2_at_zero(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
            positive: bool,
        ) {
            prop_assert!(nce_loss(&a, &b, positive).unwrap() >= 0.0);
            let zero = [0.0; 4];
            prop_assert!((nce_loss(&a, &zero, positive).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }
}
