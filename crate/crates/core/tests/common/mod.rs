//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use ndarray::Array2;
use pod_core::embedding::pair_loss;
use pod_core::model::{batch_loss, init_model, ContextMode, ModelConfig};
use pod_core::neighbors::{sample_pairs, NeighborGraph};
use pod_core::regions::RegionPage;
use pod_nn::{grad_check, CoordSelection, GradCheckReport, NnError, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for the gradient checks. The extractor's ReLUs
/// see piecewise-constant patches, so kinks are rare at this scale.
pub const GRAD_STEP: f64 = 3e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Four regions of piecewise-constant patches on a small neighbor chain.
pub fn grad_page(cfg: &ModelConfig, seed: u64) -> RegionPage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let side = cfg.features.warp_size;
    let mut patches = Array2::zeros((n, side * side));
    for mut row in patches.rows_mut() {
        row.fill(rng.random_range(0.6..1.0));
        for _ in 0..3 {
            let (x0, y0) = (rng.random_range(0..side - 8), rng.random_range(0..side - 8));
            let (x1, y1) = (
                rng.random_range(x0 + 4..side),
                rng.random_range(y0 + 4..side),
            );
            let level = rng.random_range(0.0..0.5);
            for y in y0..y1 {
                for x in x0..x1 {
                    row[y * side + x] = level;
                }
            }
        }
    }
    let adjacency = vec![vec![1, 2], vec![0], vec![0, 3], vec![2]];
    RegionPage {
        id: "grad".into(),
        boxes: vec![pod_core::BBox::new(0, 0, 1, 1).unwrap(); n],
        patches,
        graph: NeighborGraph::from_adjacency(adjacency, 20),
        labels: (0..n)
            .map(|_| Some(rng.random_range(0..cfg.classes.len())))
            .collect(),
    }
}

/// Initialized parameters with small random biases so no bias sits at zero.
pub fn grad_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_model(cfg, &mut rng).unwrap();
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    params
}

fn nn_err(e: pod_core::Error) -> NnError {
    NnError::Invalid(e.to_string())
}

/// Gradient check of the classification loss through backbone, embedding,
/// attention and head, dropout off.
pub fn check_end_to_end(seed: u64) -> GradCheckReport {
    let cfg = ModelConfig::default();
    let params = grad_params(&cfg, seed);
    let page = grad_page(&cfg, 100 + seed);
    grad_check(
        &params,
        GRAD_STEP,
        &CoordSelection::Sample {
            per_tensor: 4,
            seed,
        },
        |p, tape| {
            Ok(
                batch_loss::<ChaCha8Rng>(tape, p, &cfg, &[&page], ContextMode::Attention, None)
                    .map_err(nn_err)?
                    .expect("labeled page"),
            )
        },
    )
    .unwrap()
}

/// Gradient check of the negative-sampling loss over backbone and embedding.
pub fn check_pair_loss(seed: u64) -> GradCheckReport {
    let cfg = ModelConfig::default();
    let all = grad_params(&cfg, seed);
    let mut params = ParamSet::new();
    for name in all
        .names()
        .filter(|n| n.starts_with("backbone.") || n.starts_with("embedding."))
    {
        params.insert(name, all.get(name).unwrap().clone());
    }
    let page = grad_page(&cfg, 200 + seed);
    let pairs = sample_pairs(&page.graph, 2, &mut ChaCha8Rng::seed_from_u64(seed));
    grad_check(
        &params,
        GRAD_STEP,
        &CoordSelection::Sample {
            per_tensor: 4,
            seed,
        },
        |p, tape| pair_loss(tape, p, page.patches.clone(), &pairs, &cfg.features).map_err(nn_err),
    )
    .unwrap()
}
