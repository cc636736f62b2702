//! Grid proposal algorithm.
//!
//! A balanced binary map is cut into horizontal bands at blank row runs of
//! height `≥ R`; each band is split into one to three columns at blank
//! divider bands; each column cell is cut into rows again; every leaf cell is
//! shrunk to the bounding box of its non-trivial 8-connected components.
//! When the resulting rows are short on average the whole page is redone
//! with a larger `R`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::page::{balance_margins, binarize, BinarizeConfig, BinaryPageMap, GrayPage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Minimum height of a blank row run that separates rows, in pixels.
    pub r: u32,
    /// Width of the blank band a column divider must cross.
    pub divider_band_width: u32,
    /// Connected components smaller than this (pixels) are ignored.
    pub min_cc_area: u32,
    pub max_redivide_iters: u32,
    pub redivide_factor: u32,
    /// Redivide while mean row height < `avg_height_multiplier · R`.
    pub avg_height_multiplier: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            r: 15,
            divider_band_width: 5,
            min_cc_area: 9,
            max_redivide_iters: 3,
            redivide_factor: 2,
            avg_height_multiplier: 3,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid.r", self.r),
            ("grid.divider_band_width", self.divider_band_width),
            ("grid.min_cc_area", self.min_cc_area),
            ("grid.max_redivide_iters", self.max_redivide_iters),
            ("grid.avg_height_multiplier", self.avg_height_multiplier),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if self.redivide_factor < 2 {
            return Err(Error::Config(
                "grid.redivide_factor must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Disjoint proposals for one page, in reading order, in page coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub page: [u32; 2],
    pub proposals: Vec<BBox>,
    /// Row-run threshold of the accepted pass.
    #[serde(skip)]
    pub final_r: u32,
    #[serde(skip)]
    pub redivisions: u32,
}

impl ProposalSet {
    pub fn new(page: [u32; 2], mut proposals: Vec<BBox>) -> Self {
        proposals.sort_by_key(BBox::reading_key);
        Self {
            page,
            proposals,
            final_r: 0,
            redivisions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn is_pairwise_disjoint(&self) -> bool {
        self.proposals
            .iter()
            .enumerate()
            .all(|(i, a)| self.proposals[i + 1..].iter().all(|b| iou(a, b) == 0.0))
    }
}

fn row_is_blank(m: &BinaryPageMap, y: u32, x0: u32, x1: u32) -> bool {
    (x0..x1).all(|x| !m.is_fg(x, y))
}

/// Maximal runs of blank rows (restricted to the columns of `region`) with
/// length `≥ r`, as `(y_start, y_end)` half-open pairs in map coordinates.
pub fn blank_row_runs_in(m: &BinaryPageMap, region: &BBox, r: u32) -> Vec<(u32, u32)> {
    let mut runs = Vec::new();
    let mut start: Option<u32> = None;
    for y in region.y0()..region.y1() {
        let blank = row_is_blank(m, y, region.x0(), region.x1());
        match (blank, start) {
            (true, None) => start = Some(y),
            (false, Some(s)) => {
                if y - s >= r {
                    runs.push((s, y));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        if region.y1() - s >= r {
            runs.push((s, region.y1()));
        }
    }
    runs
}

/// Blank row runs of height `≥ r` over the whole map.
pub fn find_blank_row_runs(m: &BinaryPageMap, r: u32) -> Vec<(u32, u32)> {
    blank_row_runs_in(m, &m.bounds(), r)
}

/// Horizontal strips of `region` left after removing blank runs `≥ r`.
fn row_segments(m: &BinaryPageMap, region: &BBox, r: u32) -> Vec<BBox> {
    let mut segments = Vec::new();
    let mut y = region.y0();
    for (start, end) in blank_row_runs_in(m, region, r) {
        if start > y {
            segments.extend(BBox::new(region.x0(), y, region.x1(), start).ok());
        }
        y = end;
    }
    if y < region.y1() {
        segments.extend(BBox::new(region.x0(), y, region.x1(), region.y1()).ok());
    }
    segments
}

fn divider_is_blank(m: &BinaryPageMap, band: &BBox, center: u32, band_width: u32) -> bool {
    let lo = center.saturating_sub(band_width / 2).max(band.x0());
    let hi = (center.saturating_sub(band_width / 2) + band_width).min(band.x1());
    (band.y0()..band.y1()).all(|y| (lo..hi).all(|x| !m.is_fg(x, y)))
}

/// Splits `band` into the largest column count `c ∈ {1,2,3}` whose `c − 1`
/// dividers, centered at `x0 + j·w/c`, cross only blank pixels.
pub fn split_columns(m: &BinaryPageMap, band: &BBox, divider_band_width: u32) -> Vec<BBox> {
    let w = band.width();
    let valid = |c: u32| -> bool {
        w >= c * divider_band_width.max(1)
            && (1..c).all(|j| divider_is_blank(m, band, band.x0() + j * w / c, divider_band_width))
    };
    let columns = (2..=3).rev().find(|&c| valid(c)).unwrap_or(1);
    (0..columns)
        .filter_map(|j| {
            BBox::new(
                band.x0() + j * w / columns,
                band.y0(),
                band.x0() + (j + 1) * w / columns,
                band.y1(),
            )
            .ok()
        })
        .collect()
}

/// Bounding box of all 8-connected foreground components inside `cell`
/// whose area is at least `min_cc_area`.
pub fn refine_cell(m: &BinaryPageMap, cell: &BBox, min_cc_area: u32) -> Option<BBox> {
    let (cw, ch) = (cell.width() as usize, cell.height() as usize);
    let mut seen = vec![false; cw * ch];
    let mut queue = VecDeque::new();
    let mut extent: Option<(u32, u32, u32, u32)> = None;
    for sy in 0..ch {
        for sx in 0..cw {
            let (gx, gy) = (cell.x0() + sx as u32, cell.y0() + sy as u32);
            if seen[sy * cw + sx] || !m.is_fg(gx, gy) {
                continue;
            }
            seen[sy * cw + sx] = true;
            queue.push_back((sx, sy));
            let mut area = 0u32;
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            while let Some((x, y)) = queue.pop_front() {
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= cw as i64 || ny >= ch as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if !seen[ny * cw + nx]
                            && m.is_fg(cell.x0() + nx as u32, cell.y0() + ny as u32)
                        {
                            seen[ny * cw + nx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            if area >= min_cc_area {
                let b = (x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1);
                extent = Some(match extent {
                    None => b,
                    Some(e) => (e.0.min(b.0), e.1.min(b.1), e.2.max(b.2), e.3.max(b.3)),
                });
            }
        }
    }
    extent.map(|(x0, y0, x1, y1)| {
        BBox::new(
            cell.x0() + x0,
            cell.y0() + y0,
            cell.x0() + x1,
            cell.y0() + y1,
        )
        .expect("component boxes are non-empty")
    })
}

fn single_pass(m: &BinaryPageMap, cfg: &GridConfig, r: u32) -> Vec<BBox> {
    let mut out = Vec::new();
    for band in row_segments(m, &m.bounds(), r) {
        for column in split_columns(m, &band, cfg.divider_band_width) {
            for cell in row_segments(m, &column, r) {
                out.extend(refine_cell(m, &cell, cfg.min_cc_area));
            }
        }
    }
    out
}

/// Runs the full grid proposal algorithm on a margin-balanced map.
///
/// Output boxes are in the coordinates of the source page.
pub fn propose(m: &BinaryPageMap, cfg: &GridConfig) -> ProposalSet {
    let mut r = cfg.r;
    let mut redivisions = 0;
    let boxes = loop {
        let boxes = single_pass(m, cfg, r);
        if boxes.is_empty() {
            break boxes;
        }
        let mean = boxes.iter().map(|b| f64::from(b.height())).sum::<f64>() / boxes.len() as f64;
        if mean < f64::from(cfg.avg_height_multiplier * r) && redivisions < cfg.max_redivide_iters {
            r *= cfg.redivide_factor;
            redivisions += 1;
            continue;
        }
        break boxes;
    };
    let (ox, oy) = m.origin();
    let (w, h) = m.source_size();
    let mut set = ProposalSet::new([w, h], boxes.iter().map(|b| b.translate(ox, oy)).collect());
    set.final_r = r;
    set.redivisions = redivisions;
    set
}

/// Binarizes, balances margins and proposes regions for a grayscale page.
pub fn propose_page(
    page: &GrayPage,
    binarize_cfg: &BinarizeConfig,
    cfg: &GridConfig,
) -> ProposalSet {
    propose(&balance_margins(&binarize(page, binarize_cfg)), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(w: u32, h: u32) -> BinaryPageMap {
        BinaryPageMap::new(w, h, vec![false; (w * h) as usize]).unwrap()
    }

    fn paint(m: &mut BinaryPageMap, x0: u32, y0: u32, x1: u32, y1: u32) {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, true);
            }
        }
    }

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Independent run-length scan over row-blank flags.
    fn runs_oracle(m: &BinaryPageMap, r: u32) -> Vec<(u32, u32)> {
        let flags: Vec<bool> = (0..m.height())
            .map(|y| (0..m.width()).all(|x| !m.is_fg(x, y)))
            .collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < flags.len() {
            if flags[i] {
                let j = (i..flags.len()).find(|&k| !flags[k]).unwrap_or(flags.len());
                if (j - i) as u32 >= r {
                    out.push((i as u32, j as u32));
                }
                i = j;
            } else {
                i += 1;
            }
        }
        out
    }

    #[test]
    fn blank_run_examples() {
        assert_eq!(find_blank_row_runs(&blank(20, 100), 15), vec![(0, 100)]);
        let mut m = blank(20, 100);
        paint(&mut m, 0, 0, 20, 40);
        paint(&mut m, 0, 60, 20, 100);
        assert_eq!(find_blank_row_runs(&m, 15), vec![(40, 60)]);
        assert_eq!(find_blank_row_runs(&m, 15), runs_oracle(&m, 15));
        let mut g = blank(20, 100);
        paint(&mut g, 0, 0, 20, 45);
        paint(&mut g, 0, 55, 20, 100);
        assert!(find_blank_row_runs(&g, 15).is_empty());
    }

    #[test]
    fn split_columns_examples() {
        let m = blank(90, 20);
        let band = m.bounds();
        assert_eq!(split_columns(&m, &band, 5).len(), 3);

        let mut blocked = blank(90, 20);
        for x in [45, 30, 60] {
            blocked.set(x, 10, true);
        }
        assert_eq!(split_columns(&blocked, &band, 5), vec![band]);

        // two text blocks around a central gutter, thirds covered
        let mut two = blank(90, 20);
        paint(&mut two, 0, 2, 40, 18);
        paint(&mut two, 50, 2, 90, 18);
        let cols = split_columns(&two, &band, 5);
        assert_eq!(cols, vec![bb(0, 0, 45, 20), bb(45, 0, 90, 20)]);
    }

    #[test]
    fn refine_cell_examples() {
        let m = blank(30, 30);
        assert_eq!(refine_cell(&m, &m.bounds(), 9), None);

        let mut blob = blank(30, 30);
        paint(&mut blob, 8, 5, 18, 15);
        assert_eq!(
            refine_cell(&blob, &blob.bounds(), 9),
            Some(bb(8, 5, 18, 15))
        );

        paint(&mut blob, 25, 25, 27, 27); // area 4
        assert_eq!(
            refine_cell(&blob, &blob.bounds(), 9),
            Some(bb(8, 5, 18, 15))
        );
        assert_eq!(
            refine_cell(&blob, &blob.bounds(), 4),
            Some(bb(8, 5, 27, 27))
        );
    }

    #[test]
    fn refine_uses_diagonal_connectivity() {
        let mut m = blank(10, 10);
        for i in 0..6 {
            m.set(2 + i, 2 + i, true);
        }
        // six diagonal pixels form one 8-connected component
        assert_eq!(refine_cell(&m, &m.bounds(), 6), Some(bb(2, 2, 8, 8)));
        assert_eq!(refine_cell(&m, &m.bounds(), 7), None);
    }

    #[test]
    fn propose_blank_page() {
        let set = propose(&blank(50, 50), &GridConfig::default());
        assert!(set.is_empty());
        assert_eq!(set.page, [50, 50]);
    }

    #[test]
    fn propose_two_stacked_blocks() {
        let mut m = blank(200, 260);
        paint(&mut m, 20, 20, 180, 120);
        paint(&mut m, 20, 140, 180, 240);
        let m = balance_margins(&m);
        let set = propose(&m, &GridConfig::default());
        assert_eq!(
            set.proposals,
            vec![bb(20, 20, 180, 120), bb(20, 140, 180, 240)]
        );
        assert_eq!(set.redivisions, 0);
    }

    #[test]
    fn propose_redivides_thin_lines() {
        // 30 lines, 10px tall with 16px gaps: each line is its own row at R=15
        let mut m = blank(200, 30 * 26 + 40);
        for i in 0..30 {
            let y = 20 + i * 26;
            paint(&mut m, 20, y, 180, y + 10);
        }
        let cfg = GridConfig::default();
        let set = propose(&balance_margins(&m), &cfg);
        assert_eq!(set.redivisions, 1);
        assert_eq!(set.final_r, 30);
        assert_eq!(set.proposals, vec![bb(20, 20, 180, 20 + 29 * 26 + 10)]);
    }

    #[test]
    fn propose_two_columns_then_rows() {
        let mut m = blank(300, 300);
        // left column: two blocks; right column: one tall block
        paint(&mut m, 20, 20, 140, 120);
        paint(&mut m, 20, 140, 140, 280);
        paint(&mut m, 160, 20, 280, 280);
        let set = propose(&balance_margins(&m), &GridConfig::default());
        assert_eq!(
            set.proposals,
            vec![
                bb(20, 20, 140, 120),
                bb(160, 20, 280, 280),
                bb(20, 140, 140, 280)
            ]
        );
    }

    #[test]
    fn proposals_map_back_through_trimmed_margins() {
        let mut m = blank(200, 200);
        paint(&mut m, 120, 130, 180, 190);
        let b = balance_margins(&m);
        assert_ne!(b.origin(), (0, 0));
        let set = propose(&b, &GridConfig::default());
        assert_eq!(set.proposals, vec![bb(120, 130, 180, 190)]);
        assert_eq!(set.page, [200, 200]);
    }

    #[test]
    fn config_validation() {
        assert!(GridConfig::default().validate().is_ok());
        let bad = GridConfig {
            redivide_factor: 1,
            ..GridConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = GridConfig {
            r: 0,
            ..GridConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    fn arb_map() -> impl Strategy<Value = BinaryPageMap> {
        (
            20u32..120,
            20u32..120,
            prop::collection::vec((0u32..120, 0u32..120, 1u32..30, 1u32..30), 0..12),
            prop::collection::vec((0u32..120, 0u32..120), 0..40),
        )
            .prop_map(|(w, h, rects, dots)| {
                let mut m = blank(w, h);
                for (x, y, rw, rh) in rects {
                    let (x0, y0) = (x % w, y % h);
                    paint(&mut m, x0, y0, (x0 + rw).min(w), (y0 + rh).min(h));
                }
                for (x, y) in dots {
                    m.set(x % w, y % h, true);
                }
                m
            })
    }

    /// Every component (via a whole-map labeling) with area ≥ min lies in
    /// exactly one proposal.
    fn components(m: &BinaryPageMap) -> Vec<(u32, BBox)> {
        let (w, h) = (m.width() as usize, m.height() as usize);
        let mut label = vec![usize::MAX; w * h];
        let mut out = Vec::new();
        for s in 0..w * h {
            if label[s] != usize::MAX || !m.is_fg((s % w) as u32, (s / w) as u32) {
                continue;
            }
            let id = out.len();
            let mut stack = vec![s];
            label[s] = id;
            let (mut area, mut bx) = (0u32, None::<BBox>);
            while let Some(p) = stack.pop() {
                let (x, y) = ((p % w) as u32, (p / w) as u32);
                area += 1;
                let px = bb(x, y, x + 1, y + 1);
                bx = Some(bx.map_or(px, |b| crate::geometry::union_bbox(&b, &px)));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let q = ny as usize * w + nx as usize;
                        if label[q] == usize::MAX && m.is_fg(nx as u32, ny as u32) {
                            label[q] = id;
                            stack.push(q);
                        }
                    }
                }
            }
            out.push((area, bx.unwrap()));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn propose_invariants(m in arb_map()) {
            let cfg = GridConfig::default();
            let b = balance_margins(&m);
            let set = propose(&b, &cfg);
            prop_assert!(set.is_pairwise_disjoint());
            prop_assert!(set.redivisions <= cfg.max_redivide_iters);
            prop_assert_eq!(&set, &propose(&b, &cfg));
            for p in &set.proposals {
                // tight: every edge row and column touches ink
                let touches_row = |y: u32| (p.x0()..p.x1()).any(|x| m.is_fg(x, y));
                let touches_col = |x: u32| (p.y0()..p.y1()).any(|y| m.is_fg(x, y));
                prop_assert!(touches_row(p.y0()) && touches_row(p.y1() - 1));
                prop_assert!(touches_col(p.x0()) && touches_col(p.x1() - 1));
            }
            for (area, cb) in components(&m) {
                if area >= cfg.min_cc_area {
                    let holders = set.proposals.iter().filter(|p| p.contains(&cb)).count();
                    prop_assert_eq!(holders, 1, "component {} area {}", cb, area);
                }
            }
        }
    }
}
