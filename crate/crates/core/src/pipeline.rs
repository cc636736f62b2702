//! Stage wiring over on-disk artifacts: corpora, checkpoints, detections,
//! reports and rendered overlays.
//!
//! Random streams per stage: model initialization uses `derive_seed(seed,
//! "init")`, pretraining `"pretrain"`, training `"train"` and the
//! train/validation split `"split"`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::info;
use pod_nn::ParamSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{read_json, write_json, Detection, PageAnnotations, TokenSidecar};
use crate::config::RunConfig;
use crate::embedding::{pretrain, PretrainReport};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grid::{propose_page, ProposalSet};
use crate::metrics::{evaluate, MetricReport, PageEval};
use crate::model::{
    detect_regions, init_model, load_checkpoint, save_checkpoint, train, CheckpointMeta,
    EpochStats, Stage,
};
use crate::page::{load_page, GrayPage};
use crate::postprocess::postprocess;
use crate::regions::RegionPage;
use crate::seeds::derive_seed;
use crate::synth::{load_manifest, ManifestEntry};

/// Share of corpus pages held out for validation during training.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Prefixes of the parameters a pretraining checkpoint carries.
pub const PRETRAINED_PREFIXES: [&str; 2] = ["backbone.", "embedding."];

#[derive(Debug, Clone)]
pub struct CorpusPage {
    pub entry: ManifestEntry,
    pub image: GrayPage,
    pub annotations: PageAnnotations,
    pub tokens: TokenSidecar,
}

/// Loads every page listed in `dir/manifest.json`.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusPage>> {
    let manifest = load_manifest(dir)?;
    manifest
        .pages
        .into_iter()
        .map(|entry| {
            let annotations: PageAnnotations = read_json(&entry.annotations_path(dir))?;
            annotations.validate()?;
            Ok(CorpusPage {
                image: load_page(&entry.image_path(dir))?,
                tokens: read_json(&entry.tokens_path(dir))?,
                annotations,
                entry,
            })
        })
        .collect()
}

pub fn proposals(image: &GrayPage, cfg: &RunConfig) -> ProposalSet {
    propose_page(image, &cfg.binarize, &cfg.grid)
}

pub fn region_page(id: &str, image: &GrayPage, cfg: &RunConfig) -> Result<RegionPage> {
    RegionPage::new(
        id,
        image,
        &proposals(image, cfg),
        cfg.delta_neighbor,
        &cfg.model.features,
    )
}

/// Region pages labeled from each page's ground truth.
pub fn labeled_pages(pages: &[CorpusPage], cfg: &RunConfig) -> Result<Vec<RegionPage>> {
    pages
        .iter()
        .map(|p| {
            region_page(&p.entry.id, &p.image, cfg)?.with_labels(&p.annotations, &cfg.model.classes)
        })
        .collect()
}

/// Shuffled page indices split into `(train, validation)`; both sorted.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let held = if n < 2 {
        0
    } else {
        ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1)
    };
    let mut validation = order[..held].to_vec();
    let mut training = order[held..].to_vec();
    validation.sort_unstable();
    training.sort_unstable();
    (training, validation)
}

/// Fresh model parameters for `cfg.seed`.
pub fn initial_params(cfg: &RunConfig) -> Result<ParamSet> {
    init_model(
        &cfg.model,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init")),
    )
}

/// Pretrains backbone and embedding from a fresh initialization and keeps
/// only those parameters.
pub fn run_pretrain(pages: &[RegionPage], cfg: &RunConfig) -> Result<(ParamSet, PretrainReport)> {
    let mut params = initial_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));
    let report = pretrain(
        pages,
        &mut params,
        &cfg.model.features,
        &cfg.pretrain,
        &mut rng,
    )?;
    let mut kept = ParamSet::new();
    for prefix in PRETRAINED_PREFIXES {
        kept.copy_prefix_from(&params, prefix);
    }
    Ok((kept, report))
}

/// Fresh parameters with backbone and embedding replaced by `pretrained`.
pub fn start_from(pretrained: Option<&ParamSet>, cfg: &RunConfig) -> Result<ParamSet> {
    let mut params = initial_params(cfg)?;
    if let Some(p) = pretrained {
        for (name, t) in p.iter() {
            let fresh = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if fresh.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has the wrong shape"
                )));
            }
        }
        for prefix in PRETRAINED_PREFIXES {
            if params.copy_prefix_from(p, prefix) == 0 {
                return Err(Error::Checkpoint(format!(
                    "pretrained checkpoint has no `{prefix}*` tensors"
                )));
            }
        }
    }
    Ok(params)
}

/// Trains on the split's training pages, reporting validation accuracy per epoch.
pub fn run_train(
    pages: &[RegionPage],
    pretrained: Option<&ParamSet>,
    cfg: &RunConfig,
) -> Result<(ParamSet, Vec<EpochStats>)> {
    let (tr, va) = split_indices(pages.len(), cfg.seed);
    let training: Vec<RegionPage> = tr.iter().map(|&i| pages[i].clone()).collect();
    let validation: Vec<RegionPage> = va.iter().map(|&i| pages[i].clone()).collect();
    let mut params = start_from(pretrained, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
    let stats = train(
        &training,
        &validation,
        &mut params,
        &cfg.model,
        &cfg.train,
        &mut rng,
    )?;
    Ok((params, stats))
}

pub fn checkpoint_meta(stage: Stage, cfg: &RunConfig) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        seed: cfg.seed,
        model: cfg.model.clone(),
        context: cfg.train.context,
    }
}

pub fn save_model(path: &Path, params: &ParamSet, stage: Stage, cfg: &RunConfig) -> Result<()> {
    save_checkpoint(path, params, &checkpoint_meta(stage, cfg))
}

/// Loads a checkpoint and checks it was written at `stage`.
pub fn load_model(path: &Path, stage: Stage) -> Result<(ParamSet, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if meta.stage != stage {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {stage:?}",
            path.display(),
            meta.stage
        )));
    }
    Ok((params, meta))
}

/// Proposes, warps and classifies one page with a trained model.
pub fn detect_image(
    image: &GrayPage,
    params: &ParamSet,
    meta: &CheckpointMeta,
    cfg: &RunConfig,
) -> Result<Vec<Detection>> {
    let mut run = cfg.clone();
    run.model = meta.model.clone();
    let page = region_page("", image, &run)?;
    detect_regions(&page, params, &meta.model, meta.context)
}

/// Detects every corpus page into `out/<id>.json`; returns the written paths.
pub fn detect_corpus(
    corpus: &Path,
    params: &ParamSet,
    meta: &CheckpointMeta,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(corpus)?;
    create_dir(out)?;
    let mut written = Vec::with_capacity(manifest.pages.len());
    for entry in &manifest.pages {
        let dets = detect_image(&load_page(&entry.image_path(corpus))?, params, meta, cfg)?;
        let path = out.join(format!("{}.json", entry.id));
        write_json(&path, &dets)?;
        written.push(path);
    }
    info!("detected {} pages into {}", written.len(), out.display());
    Ok(written)
}

/// Postprocesses one detections file; tokens are optional.
pub fn postprocess_file(detections: &Path, tokens: Option<&Path>, out: &Path) -> Result<()> {
    let dets: Vec<Detection> = read_json(detections)?;
    let tokens: Option<TokenSidecar> = tokens.map(read_json).transpose()?;
    write_json(out, &postprocess(&dets, tokens.as_ref()))
}

/// Postprocesses every `*.json` in `detections`, pairing each with
/// `tokens/<same name>` when that file exists.
pub fn postprocess_dir(detections: &Path, tokens: Option<&Path>, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let files = json_files(detections)?;
    for f in &files {
        let name = f.file_name().expect("listed file");
        let tok = tokens.map(|t| t.join(name)).filter(|t| t.exists());
        postprocess_file(f, tok.as_deref(), &out.join(name))?;
    }
    Ok(files.len())
}

/// Scores `detections/<page_id>.json` against every annotation file.
pub fn evaluate_dirs(
    detections: &Path,
    annotations: &Path,
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let mut loaded = Vec::new();
    for f in json_files(annotations)? {
        let gt: PageAnnotations = read_json(&f)?;
        gt.validate()?;
        let dets: Vec<Detection> = read_json(&detections.join(format!("{}.json", gt.page_id)))?;
        loaded.push((dets, gt));
    }
    let pages: Vec<PageEval> = loaded
        .iter()
        .map(|(d, g)| PageEval {
            detections: d,
            ground_truth: &g.annotations,
        })
        .collect();
    evaluate(&pages, &cfg.model.classes, &cfg.eval)
}

/// Sorted `*.json` files directly inside `dir`.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = |source| Error::Read {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(read)? {
        let path = entry.map_err(read)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })
}

// ------------------------------------------------------------------ render

/// One box to draw; proposals carry neither class nor score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub bbox: BBox,
    pub class: Option<String>,
    pub score: Option<f64>,
}

impl From<&Detection> for Overlay {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            class: Some(d.class.clone()),
            score: Some(d.score),
        }
    }
}

impl From<&BBox> for Overlay {
    fn from(b: &BBox) -> Self {
        Self {
            bbox: *b,
            class: None,
            score: None,
        }
    }
}

pub const PROPOSAL_COLOR: [u8; 3] = [255, 0, 255];

const CLASS_COLORS: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 200, 200],
    [240, 50, 230],
    [128, 128, 0],
    [0, 0, 128],
    [170, 110, 40],
    [128, 0, 0],
    [0, 128, 128],
];

/// Color of a class by its vocabulary index; unknown classes and proposals
/// are magenta.
pub fn overlay_color(class: Option<&str>, cfg: &RunConfig) -> [u8; 3] {
    class
        .and_then(|c| cfg.model.classes.index_of(c).ok())
        .map_or(PROPOSAL_COLOR, |i| CLASS_COLORS[i % CLASS_COLORS.len()])
}

/// 3×5 glyphs for `0`–`9` and `.`, one row per entry, high bit on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 3, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
    [0, 0, 0, 0, 2],
];

/// Draws `text` (digits and dots) with its top-left at `(x, y)`, clipped to `clip`.
fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, clip: &BBox, color: Rgb<u8>) {
    for (k, c) in text.chars().enumerate() {
        let glyph = match c {
            '0'..='9' => GLYPHS[c as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => continue,
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                let (px, py) = (x + 4 * k as u32 + col, y + row as u32);
                if px >= clip.x0() && px < clip.x1() && py >= clip.y0() && py < clip.y1() {
                    img.put_pixel(px, py, color);
                }
            }
        }
    }
}

/// The page in RGB with a one-pixel outline on each box's border pixels and
/// the score, when present, written inside the box's top-left corner.
pub fn render(page: &GrayPage, overlays: &[Overlay], cfg: &RunConfig) -> Result<RgbImage> {
    let (w, h) = (page.width(), page.height());
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let v = page.get(x, y);
        Rgb([v, v, v])
    });
    for o in overlays {
        let b = &o.bbox;
        if b.x1() > w || b.y1() > h {
            return Err(Error::InvalidPage(format!("box {b} outside {w}×{h} page")));
        }
        let color = Rgb(overlay_color(o.class.as_deref(), cfg));
        for x in b.x0()..b.x1() {
            img.put_pixel(x, b.y0(), color);
            img.put_pixel(x, b.y1() - 1, color);
        }
        for y in b.y0()..b.y1() {
            img.put_pixel(b.x0(), y, color);
            img.put_pixel(b.x1() - 1, y, color);
        }
        if let Some(s) = o.score {
            let inner = BBox::new(b.x0() + 1, b.y0() + 1, b.x1() - 1, b.y1() - 1);
            if let Ok(inner) = inner {
                draw_text(
                    &mut img,
                    &format!("{s:.2}"),
                    b.x0() + 2,
                    b.y0() + 2,
                    &inner,
                    color,
                );
            }
        }
    }
    Ok(img)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Write {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_partitions() {
        let (a, b) = split_indices(50, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 3), (a, b));
        assert_eq!(split_indices(1, 3), (vec![0], vec![]));
    }

    #[test]
    fn render_draws_exact_outlines() {
        let page = GrayPage::filled(40, 30, 200).unwrap();
        let cfg = RunConfig::default();
        let empty = render(&page, &[], &cfg).unwrap();
        assert!(empty.pixels().all(|p| p.0 == [200, 200, 200]));

        let b = BBox::new(5, 6, 20, 16).unwrap();
        let img = render(&page, &[Overlay::from(&b)], &cfg).unwrap();
        for (x, y) in [(5, 6), (19, 6), (5, 15), (19, 15), (12, 6), (5, 10)] {
            assert_eq!(img.get_pixel(x, y).0, PROPOSAL_COLOR, "({x},{y})");
        }
        for (x, y) in [(4, 6), (20, 6), (5, 16), (6, 7), (12, 10)] {
            assert_eq!(img.get_pixel(x, y).0, [200; 3], "({x},{y})");
        }

        let outside = BBox::new(30, 20, 41, 30).unwrap();
        assert!(render(&page, &[Overlay::from(&outside)], &cfg).is_err());
    }

    #[test]
    fn score_labels_stay_inside_the_box() {
        let page = GrayPage::filled(40, 30, 255).unwrap();
        let cfg = RunConfig::default();
        let d = Detection {
            bbox: BBox::new(2, 2, 30, 12).unwrap(),
            class: "Figure".into(),
            score: 0.97,
        };
        let img = render(&page, &[Overlay::from(&d)], &cfg).unwrap();
        let color = overlay_color(Some("Figure"), &cfg);
        let inked = img
            .enumerate_pixels()
            .filter(|(x, y, p)| p.0 == color && *x > 2 && *x < 29 && *y > 2 && *y < 11)
            .count();
        assert!(inked > 0);
        for (x, y, p) in img.enumerate_pixels() {
            if !(2..30).contains(&x) || !(2..12).contains(&y) {
                assert_eq!(p.0, [255; 3]);
            }
        }
    }
}
