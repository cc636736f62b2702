use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{NnError, ParamSet, Tape, Var};

/// Which parameter coordinates a gradient check perturbs.
#[derive(Debug, Clone)]
pub enum CoordSelection {
    All,
    /// Up to `per_tensor` coordinates drawn without replacement from each tensor.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
    Explicit(Vec<(String, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences.
///
/// `loss` builds a forward pass on a fresh tape and returns the scalar loss
/// node. For each selected coordinate the relative error is
/// `|a - b| / max(|a|, |b|, 1e-8)` with `b = (f(θ+h) - f(θ-h)) / 2h`.
pub fn grad_check<F>(
    params: &ParamSet,
    h: f64,
    selection: &CoordSelection,
    loss: F,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<Var, NnError>,
{
    if h <= 0.0 {
        return Err(NnError::Invalid(format!("finite-difference step {h}")));
    }
    let mut tape = Tape::new();
    let out = loss(params, &mut tape)?;
    let analytic = tape.backward(out)?;
    drop(tape);

    let coords: Vec<(String, usize)> = match selection {
        CoordSelection::All => params
            .iter()
            .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i)))
            .collect(),
        CoordSelection::Sample { per_tensor, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut coords = Vec::new();
            for (name, t) in params.iter() {
                let k = (*per_tensor).min(t.len());
                let mut picked = sample(&mut rng, t.len(), k).into_vec();
                picked.sort_unstable();
                coords.extend(picked.into_iter().map(|i| (name.to_string(), i)));
            }
            coords
        }
        CoordSelection::Explicit(list) => list.clone(),
    };

    let eval = |p: &ParamSet| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let out = loss(p, &mut tape)?;
        Ok(tape.scalar(out))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, idx) in coords {
        let len = work.get(&name)?.len();
        if idx >= len {
            return Err(NnError::IndexOutOfRange { index: idx, len });
        }
        let a = analytic
            .get(&name)
            .map(|g| g.as_slice().expect("standard layout")[idx])
            .unwrap_or(0.0);
        let orig = work.get(&name)?.data()[idx];
        work.get_mut(&name)?.data_mut()[idx] = orig + h;
        let plus = eval(&work)?;
        work.get_mut(&name)?.data_mut()[idx] = orig - h;
        let minus = eval(&work)?;
        work.get_mut(&name)?.data_mut()[idx] = orig;
        let b = (plus - minus) / (2.0 * h);
        let denom = a.abs().max(b.abs()).max(1e-8);
        let rel = (a - b).abs() / denom;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((name.clone(), idx));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}
