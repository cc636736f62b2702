//! A page reduced to what the networks consume: warped regions plus context graph.

use ndarray::{Array2, Axis};

use crate::annotations::PageAnnotations;
use crate::classes::ClassVocab;
use crate::error::Result;
use crate::features::{warp_regions, FeatureConfig};
use crate::geometry::BBox;
use crate::grid::ProposalSet;
use crate::neighbors::NeighborGraph;
use crate::page::GrayPage;

#[derive(Debug, Clone)]
pub struct RegionPage {
    pub id: String,
    pub boxes: Vec<BBox>,
    /// One warped patch per box.
    pub patches: Array2<f64>,
    pub graph: NeighborGraph,
    /// Assigned ground-truth class per box, when known.
    pub labels: Vec<Option<usize>>,
}

impl RegionPage {
    pub fn new(
        id: impl Into<String>,
        page: &GrayPage,
        props: &ProposalSet,
        delta: u32,
        features: &FeatureConfig,
    ) -> Result<Self> {
        let boxes = props.proposals.clone();
        Ok(Self {
            id: id.into(),
            patches: warp_regions(page, &boxes, features)?,
            graph: NeighborGraph::build(&boxes, props.page, delta),
            labels: vec![None; boxes.len()],
            boxes,
        })
    }

    /// Labels each box with its maximum-overlap ground-truth class.
    pub fn with_labels(mut self, gts: &PageAnnotations, vocab: &ClassVocab) -> Result<Self> {
        self.labels = vec![None; self.boxes.len()];
        for (i, class) in assign_ground_truth(&self.boxes, gts, vocab)? {
            self.labels[i] = Some(class);
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }
}

/// For each proposal, the class of the ground-truth box sharing the largest
/// intersection area. Ties go to the ground truth earliest in reading order;
/// proposals touching no ground truth are left out.
pub fn assign_ground_truth(
    proposals: &[BBox],
    gts: &PageAnnotations,
    vocab: &ClassVocab,
) -> Result<Vec<(usize, usize)>> {
    let mut ordered: Vec<(BBox, usize)> = gts
        .annotations
        .iter()
        .map(|a| Ok((a.bbox, vocab.index_of(&a.class)?)))
        .collect::<Result<_>>()?;
    ordered.sort_by_key(|(b, _)| b.reading_key());
    let mut out = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let mut best: Option<(u64, usize)> = None;
        for (g, class) in &ordered {
            let area = p.intersection_area(g);
            if area > 0 && best.is_none_or(|(a, _)| area > a) {
                best = Some((area, *class));
            }
        }
        if let Some((_, class)) = best {
            out.push((i, class));
        }
    }
    Ok(out)
}

/// Pages stacked into one batch: patches concatenated, graphs offset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub patches: Array2<f64>,
    /// `mask[i][j]`: region `j` is in the context of region `i`.
    pub mask: Array2<bool>,
    /// Start offset of each page's rows.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn new(pages: &[&RegionPage]) -> Self {
        let n: usize = pages.iter().map(|p| p.len()).sum();
        let cols = pages.first().map_or(0, |p| p.patches.ncols());
        let views: Vec<_> = pages.iter().map(|p| p.patches.view()).collect();
        let patches = if views.is_empty() {
            Array2::zeros((0, cols))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("equal patch widths")
        };
        let mut mask = Array2::from_elem((n, n), false);
        let mut offsets = Vec::with_capacity(pages.len());
        let mut base = 0;
        for p in pages {
            offsets.push(base);
            for i in 0..p.len() {
                for &j in p.graph.neighbors(i) {
                    mask[[base + i, base + j]] = true;
                }
            }
            base += p.len();
        }
        Self {
            patches,
            mask,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::Annotation;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn gts(items: &[(&str, BBox)]) -> PageAnnotations {
        PageAnnotations {
            page_id: "t".into(),
            size: [200, 200],
            annotations: items
                .iter()
                .map(|(c, b)| Annotation {
                    class: c.to_string(),
                    bbox: *b,
                })
                .collect(),
        }
    }

    #[test]
    fn assignment_examples() {
        let vocab = ClassVocab::default();
        let g = gts(&[("Table", bb(0, 0, 10, 10))]);
        assert_eq!(
            assign_ground_truth(&[bb(0, 0, 10, 10)], &g, &vocab).unwrap(),
            vec![(0, 9)]
        );

        // 40 px² with A, 90 px² with B
        let g = gts(&[("Figure", bb(0, 0, 10, 4)), ("Equation", bb(0, 10, 10, 19))]);
        let p = bb(0, 0, 10, 19);
        assert_eq!(p.intersection_area(&g.annotations[0].bbox), 40);
        assert_eq!(p.intersection_area(&g.annotations[1].bbox), 90);
        assert_eq!(assign_ground_truth(&[p], &g, &vocab).unwrap(), vec![(0, 1)]);

        let g = gts(&[("Figure", bb(0, 0, 10, 10))]);
        assert!(assign_ground_truth(&[bb(50, 50, 60, 60)], &g, &vocab)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ties_go_to_reading_order() {
        let vocab = ClassVocab::default();
        let g = gts(&[("Figure", bb(0, 10, 10, 20)), ("Table", bb(0, 0, 10, 10))]);
        assert_eq!(
            assign_ground_truth(&[bb(0, 5, 10, 15)], &g, &vocab).unwrap(),
            vec![(0, 9)]
        );
    }
}
