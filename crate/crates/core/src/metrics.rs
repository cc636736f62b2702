//! Detection metrics: VOC all-points AP, match-rule F1 counts and confusion
//! matrices.

use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, Detection};
use crate::classes::ClassVocab;
use crate::error::{Error, Result};
use crate::geometry::iou;

pub const DEFAULT_IOU: f64 = 0.8;
/// IoU at which a detection counts as a duplicate of an already matched object.
pub const DUPLICATE_IOU: f64 = 0.7;

/// Detections and ground truth of one page.
#[derive(Debug, Clone, Copy)]
pub struct PageEval<'a> {
    pub detections: &'a [Detection],
    pub ground_truth: &'a [Annotation],
}

/// Indices of `dets` by descending score; ties keep input order.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// All-points interpolated AP of a ranked TP/FP sequence against `n_gt` objects.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Average precision of `class` over a corpus; `None` when it has no ground truth.
///
/// Detections are ranked by score across all pages (ties by page, then input
/// order). Each takes the best-overlapping unmatched same-class object at
/// IoU ≥ `iou_thresh` as a true positive; otherwise it is a false positive.
pub fn voc_ap(pages: &[PageEval], class: &str, iou_thresh: f64) -> Option<f64> {
    let n_gt: usize = pages
        .iter()
        .map(|p| p.ground_truth.iter().filter(|g| g.class == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut pool: Vec<(usize, &Detection)> = pages
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            p.detections
                .iter()
                .filter(|d| d.class == class)
                .map(move |d| (pi, d))
        })
        .collect();
    pool.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut matched: Vec<Vec<bool>> = pages
        .iter()
        .map(|p| vec![false; p.ground_truth.len()])
        .collect();
    let mut flags = Vec::with_capacity(pool.len());
    for (pi, d) in pool {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in pages[pi].ground_truth.iter().enumerate() {
            if g.class != class || matched[pi][gi] {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[pi][gi] = true;
        }
        flags.push(best.is_some());
    }
    Some(ap_from_ranked(&flags, n_gt))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Outcome of one detection under the F1 match rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive(usize),
    FalsePositive,
    Ignored,
}

/// Classifies the detections of one page in descending score order:
/// a true positive overlaps an unmatched same-class object at IoU > 0.8; a
/// false positive overlaps an already matched object at IoU ≥ 0.7 or an
/// object of another class at IoU ≥ 0.8. Anything else counts toward nothing
/// unless `strict_fp`. Results are in input order.
pub fn match_page(dets: &[Detection], gts: &[Annotation], strict_fp: bool) -> Vec<Outcome> {
    let mut out = vec![Outcome::Ignored; dets.len()];
    let mut matched = vec![false; gts.len()];
    for di in ranked(dets) {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        let mut duplicate = false;
        let mut wrong_class = false;
        for (gi, g) in gts.iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if g.class == d.class
                && !matched[gi]
                && o > DEFAULT_IOU
                && best.is_none_or(|(b, _)| o > b)
            {
                best = Some((o, gi));
            }
            duplicate |= matched[gi] && o >= DUPLICATE_IOU;
            wrong_class |= g.class != d.class && o >= DEFAULT_IOU;
        }
        out[di] = if let Some((_, gi)) = best {
            matched[gi] = true;
            Outcome::TruePositive(gi)
        } else if duplicate || wrong_class || strict_fp {
            Outcome::FalsePositive
        } else {
            Outcome::Ignored
        };
    }
    out
}

/// Per-class counts (vocabulary order) and their total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct F1Counts {
    pub per_class: Vec<Counts>,
    pub total: Counts,
}

/// True positives and misses are credited to the object's class, false
/// positives to the predicted class.
pub fn f1_counts(pages: &[PageEval], vocab: &ClassVocab, strict_fp: bool) -> Result<F1Counts> {
    let mut per_class = vec![Counts::default(); vocab.len()];
    for page in pages {
        let outcomes = match_page(page.detections, page.ground_truth, strict_fp);
        let mut hit = vec![false; page.ground_truth.len()];
        for (d, o) in page.detections.iter().zip(&outcomes) {
            match o {
                Outcome::TruePositive(gi) => {
                    hit[*gi] = true;
                    per_class[vocab.index_of(&d.class)?].tp += 1;
                }
                Outcome::FalsePositive => per_class[vocab.index_of(&d.class)?].fp += 1,
                Outcome::Ignored => {}
            }
        }
        for (g, h) in page.ground_truth.iter().zip(hit) {
            let c = vocab.index_of(&g.class)?;
            if !h {
                per_class[c].fn_ += 1;
            }
        }
    }
    let mut total = Counts::default();
    for c in &per_class {
        total.add(c);
    }
    Ok(F1Counts { per_class, total })
}

/// Rows: object classes then `background` (unmatched detections). Columns:
/// predicted classes then `missed` (undetected objects).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Objects matched to some detection.
    pub fn matched(&self) -> usize {
        let n = self.columns.len() - 1;
        self.counts[..self.rows.len() - 1]
            .iter()
            .map(|r| r[..n].iter().sum::<usize>())
            .sum()
    }
}

/// Each object goes to its highest-IoU detection at IoU ≥ `iou_thresh`
/// (ties to the earlier detection).
pub fn confusion_matrix(
    pages: &[PageEval],
    vocab: &ClassVocab,
    iou_thresh: f64,
) -> Result<ConfusionMatrix> {
    let n = vocab.len();
    let mut counts = vec![vec![0usize; n + 1]; n + 1];
    for page in pages {
        let mut used = vec![false; page.detections.len()];
        for g in page.ground_truth {
            let row = vocab.index_of(&g.class)?;
            let mut best: Option<(f64, usize)> = None;
            for (di, d) in page.detections.iter().enumerate() {
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, di));
                }
            }
            match best {
                Some((_, di)) => {
                    used[di] = true;
                    counts[row][vocab.index_of(&page.detections[di].class)?] += 1;
                }
                None => counts[row][n] += 1,
            }
        }
        for (d, u) in page.detections.iter().zip(used) {
            if !u {
                counts[n][vocab.index_of(&d.class)?] += 1;
            }
        }
    }
    let mut rows: Vec<String> = vocab.names().to_vec();
    rows.push("background".into());
    let mut columns: Vec<String> = vocab.names().to_vec();
    columns.push("missed".into());
    Ok(ConfusionMatrix {
        rows,
        columns,
        counts,
    })
}

/// Score given to a merged detection: the highest member score.
pub fn group_score(members: &[f64]) -> f64 {
    members.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn validate_group_score(merged: f64, members: &[f64]) -> Result<()> {
    match members.iter().find(|&&m| m > merged) {
        Some(&member) => Err(Error::GroupScore { merged, member }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Count detections outside every match rule as false positives.
    pub strict_fp: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU,
            strict_fp: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("eval.iou_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub ground_truth: usize,
    pub ap: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pages: usize,
    pub iou_threshold: f64,
    pub strict_fp: bool,
    pub classes: Vec<ClassMetrics>,
    /// Mean AP over classes with ground truth.
    pub map: Option<f64>,
    pub total: TotalMetrics,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(pages: &[PageEval], vocab: &ClassVocab, cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    for page in pages {
        for name in page
            .detections
            .iter()
            .map(|d| &d.class)
            .chain(page.ground_truth.iter().map(|g| &g.class))
        {
            vocab.index_of(name)?;
        }
    }
    let f1 = f1_counts(pages, vocab, cfg.strict_fp)?;
    let mut classes = Vec::with_capacity(vocab.len());
    for (name, counts) in vocab.names().iter().zip(&f1.per_class) {
        classes.push(ClassMetrics {
            class: name.clone(),
            ground_truth: counts.tp + counts.fn_,
            ap: voc_ap(pages, name, cfg.iou_threshold),
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            counts: *counts,
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    Ok(MetricReport {
        pages: pages.len(),
        iou_threshold: cfg.iou_threshold,
        strict_fp: cfg.strict_fp,
        classes,
        map,
        total: TotalMetrics {
            precision: f1.total.precision(),
            recall: f1.total.recall(),
            f1: f1.total.f1(),
            counts: f1.total,
        },
        confusion: confusion_matrix(pages, vocab, cfg.iou_threshold)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(class: &str, b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            class: class.into(),
            score,
        }
    }

    fn gt(class: &str, b: BBox) -> Annotation {
        Annotation {
            class: class.into(),
            bbox: b,
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt("Table", bb(0, 0, 10, 10))];
        let d = [det("Table", bb(0, 0, 10, 10), 0.9)];
        let page = PageEval {
            detections: &d,
            ground_truth: &g,
        };
        assert_eq!(voc_ap(&[page], "Table", DEFAULT_IOU), Some(1.0));
        let empty = PageEval {
            detections: &[],
            ground_truth: &g,
        };
        assert_eq!(voc_ap(&[empty], "Table", DEFAULT_IOU), Some(0.0));
        assert_eq!(voc_ap(&[empty], "Figure", DEFAULT_IOU), None);
        assert!((ap_from_ranked(&[true, false, true], 2) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f1_examples() {
        let vocab = ClassVocab::default();
        let g = [gt("Table", bb(0, 0, 10, 10))];
        let run = |d: &[Detection]| {
            f1_counts(
                &[PageEval {
                    detections: d,
                    ground_truth: &g,
                }],
                &vocab,
                false,
            )
            .unwrap()
            .total
        };
        let t = run(&[det("Table", bb(0, 0, 10, 10), 0.5)]);
        assert_eq!((t.tp, t.fp, t.fn_, t.f1()), (1, 0, 0, 1.0));
        let t = run(&[det("Figure", bb(0, 0, 10, 10), 0.5)]);
        assert_eq!((t.tp, t.fp, t.fn_, t.f1()), (0, 1, 1, 0.0));
        let t = run(&[
            det("Table", bb(0, 0, 10, 10), 0.5),
            det("Table", bb(0, 0, 10, 9), 0.7),
        ]);
        assert_eq!((t.tp, t.fp, t.fn_), (1, 1, 0));
    }

    #[test]
    fn loose_detections_count_only_when_strict() {
        let vocab = ClassVocab::default();
        let g = [gt("Table", bb(0, 0, 10, 10))];
        let d = [det("Table", bb(50, 50, 60, 60), 0.5)];
        let page = PageEval {
            detections: &d,
            ground_truth: &g,
        };
        assert_eq!(f1_counts(&[page], &vocab, false).unwrap().total.fp, 0);
        assert_eq!(f1_counts(&[page], &vocab, true).unwrap().total.fp, 1);
    }

    #[test]
    fn confusion_examples() {
        let vocab = ClassVocab::default();
        let g = [gt("Equation", bb(0, 0, 100, 10))];
        let d = [det("Figure", bb(0, 0, 90, 10), 0.9)];
        let m = confusion_matrix(
            &[PageEval {
                detections: &d,
                ground_truth: &g,
            }],
            &vocab,
            DEFAULT_IOU,
        )
        .unwrap();
        let (eq, fig) = (
            vocab.index_of("Equation").unwrap(),
            vocab.index_of("Figure").unwrap(),
        );
        assert_eq!(m.counts[eq][fig], 1);
        assert_eq!(m.matched(), 1);

        let m = confusion_matrix(
            &[PageEval {
                detections: &[],
                ground_truth: &g,
            }],
            &vocab,
            DEFAULT_IOU,
        )
        .unwrap();
        assert_eq!(m.counts[eq][vocab.len()], 1);
        assert_eq!(m.matched(), 0);
    }

    #[test]
    fn group_scores() {
        assert_eq!(group_score(&[0.4, 0.9]), 0.9);
        assert_eq!(group_score(&[0.3]), 0.3);
        assert!(validate_group_score(0.9, &[0.4, 0.9]).is_ok());
        assert!(validate_group_score(0.5, &[0.4, 0.9]).is_err());
    }
}
