use std::collections::BTreeMap;
use std::path::Path;

use pod_core::classes::{DEFAULT_CLASS_COUNTS, FIGURE, FIGURE_CAPTION};
use pod_core::grid::{propose_page, GridConfig};
use pod_core::iou;
use pod_core::neighbors::NeighborGraph;
use pod_core::page::BinarizeConfig;
use pod_core::seeds::page_seed;
use pod_core::synth::{generate_corpus, generate_page, load_manifest, LayoutSpec};

const DELTA: u32 = 20;

#[test]
fn class_frequencies_follow_weights() {
    let spec = LayoutSpec::default();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for i in 0..500 {
        let page = generate_page(&spec, page_seed(7, i), "p").unwrap();
        for a in &page.annotations.annotations {
            *counts.entry(a.class.clone()).or_default() += 1;
            total += 1;
        }
    }
    let weight_sum: u32 = DEFAULT_CLASS_COUNTS.iter().map(|c| c.1).sum();
    for (class, w) in DEFAULT_CLASS_COUNTS {
        let expected = f64::from(w) / f64::from(weight_sum);
        let got = *counts.get(class).unwrap_or(&0) as f64 / total as f64;
        assert!(
            (got - expected).abs() <= 0.02,
            "{class}: {got:.4} vs {expected:.4}"
        );
    }
}

#[test]
fn proposals_recover_generated_regions() {
    let spec = LayoutSpec::default();
    let (mut hit, mut total) = (0, 0);
    for i in 0..60 {
        let page = generate_page(&spec, page_seed(11, i), "p").unwrap();
        let set = propose_page(
            &page.image,
            &BinarizeConfig::default(),
            &GridConfig::default(),
        );
        for a in &page.annotations.annotations {
            total += 1;
            hit += usize::from(set.proposals.iter().any(|b| iou(b, &a.bbox) >= 0.8));
        }
    }
    assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
}

#[test]
fn caption_look_label_is_decided_by_figure_adjacency() {
    let spec = LayoutSpec::context_pairs();
    let mut looks = 0;
    for n in 0..100 {
        let page = generate_page(&spec, page_seed(3, n), "p").unwrap();
        let regions = &page.layout.regions;
        let boxes: Vec<_> = regions.iter().map(|r| r.bbox).collect();
        let graph = NeighborGraph::build(&boxes, [spec.page_width, spec.page_height], DELTA);
        for (i, r) in regions.iter().enumerate().filter(|(_, r)| r.caption_look) {
            looks += 1;
            let near_figure = graph
                .neighbors(i)
                .iter()
                .any(|&j| regions[j].class == FIGURE);
            assert_eq!(r.class == FIGURE_CAPTION, near_figure, "page {n}: {r:?}");
        }
    }
    assert!(looks > 200);
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn empty_corpus_has_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(&LayoutSpec::default(), 0, 5, dir.path()).unwrap();
    assert!(m.pages.is_empty());
    assert_eq!(load_manifest(dir.path()).unwrap(), m);
}

#[test]
fn corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = LayoutSpec::default();
    let ma = generate_corpus(&spec, 10, 42, a.path()).unwrap();
    generate_corpus(&spec, 10, 42, b.path()).unwrap();
    assert_eq!(ma.pages.len(), 10);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 4 * 10 + 1);
    assert_eq!(sa, sb);
    for (i, e) in ma.pages.iter().enumerate() {
        assert_eq!(e.seed, page_seed(42, i));
    }
}
