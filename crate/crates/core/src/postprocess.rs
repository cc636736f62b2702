//! Rule-based cleanup of detections: caption relabeling from OCR tokens and
//! merging of split figures and tables.

use std::collections::HashMap;

use crate::annotations::{Detection, TokenSidecar};
use crate::classes::{BODY_TEXT, FIGURE, FIGURE_CAPTION, TABLE, TABLE_CAPTION};
use crate::geometry::{iou, union_bbox, BBox};

/// Lowercases and strips trailing ASCII punctuation and digits: `"Fig.3:"` → `"fig"`.
pub fn normalize_token(token: &str) -> String {
    token
        .to_lowercase()
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_ascii_digit())
        .to_string()
}

/// Relabels Body Text detections whose first token marks a caption.
/// Tokens are looked up by exact box; boxes and scores are left untouched.
pub fn reclassify_captions(dets: &[Detection], tokens: &TokenSidecar) -> Vec<Detection> {
    let lookup: HashMap<BBox, &[String]> = tokens
        .iter()
        .map(|t| (t.bbox, t.tokens.as_slice()))
        .collect();
    dets.iter()
        .map(|d| {
            let mut d = d.clone();
            if d.class != BODY_TEXT {
                return d;
            }
            let Some(first) = lookup.get(&d.bbox).and_then(|t| t.first()) else {
                return d;
            };
            let norm = normalize_token(first);
            if norm.contains("fig") {
                d.class = FIGURE_CAPTION.to_string();
            } else if matches!(norm.as_str(), "table" | "tab" | "tbl") {
                d.class = TABLE_CAPTION.to_string();
            }
            d
        })
        .collect()
}

fn sort_reading(dets: &mut [Detection]) {
    dets.sort_by_key(|a| a.bbox.reading_key());
}

/// First mergeable pair in reading order, with the indices its union absorbs.
fn find_merge(
    dets: &[Detection],
    class: &str,
    blocks: &impl Fn(&str) -> bool,
) -> Option<(usize, usize, Vec<usize>)> {
    let members: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class == class)
        .collect();
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let u = union_bbox(&dets[i].bbox, &dets[j].bbox);
            let mut absorbed = Vec::new();
            let mut blocked = false;
            for (k, d) in dets.iter().enumerate() {
                if k == i || k == j || iou(&u, &d.bbox) == 0.0 {
                    continue;
                }
                if blocks(&d.class) {
                    blocked = true;
                    break;
                }
                absorbed.push(k);
            }
            if !blocked {
                return Some((i, j, absorbed));
            }
        }
    }
    None
}

/// Repeatedly merges the first eligible pair in reading order until none is
/// left. Overlapping a detection whose class `blocks` prevents the merge;
/// other overlapped detections are dropped.
fn merge_class(dets: &[Detection], class: &str, blocks: impl Fn(&str) -> bool) -> Vec<Detection> {
    let mut out = dets.to_vec();
    sort_reading(&mut out);
    while let Some((i, j, absorbed)) = find_merge(&out, class, &blocks) {
        let merged = Detection {
            bbox: union_bbox(&out[i].bbox, &out[j].bbox),
            class: class.to_string(),
            score: out[i].score.max(out[j].score),
        };
        let mut drop: Vec<usize> = absorbed;
        drop.push(j);
        out[i] = merged;
        drop.sort_unstable();
        for k in drop.into_iter().rev() {
            out.remove(k);
        }
        sort_reading(&mut out);
    }
    out
}

/// Figure pairs merge only when their union overlaps no other detection.
pub fn merge_figures(dets: &[Detection]) -> Vec<Detection> {
    merge_class(dets, FIGURE, |_| true)
}

/// Table pairs merge unless the union overlaps Body Text or a caption;
/// other detections it overlaps are dropped.
pub fn merge_tables(dets: &[Detection]) -> Vec<Detection> {
    merge_class(dets, TABLE, |c| {
        [BODY_TEXT, FIGURE_CAPTION, TABLE_CAPTION].contains(&c)
    })
}

/// Caption relabeling (when tokens are given), then figure and table merging.
pub fn postprocess(dets: &[Detection], tokens: Option<&TokenSidecar>) -> Vec<Detection> {
    let relabeled = match tokens {
        Some(t) => reclassify_captions(dets, t),
        None => dets.to_vec(),
    };
    merge_tables(&merge_figures(&relabeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::TokenRegion;
    use crate::classes::EQUATION;

    fn det(class: &str, b: [u32; 4], score: f64) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            class: class.into(),
            score,
        }
    }

    fn tokens(b: [u32; 4], first: &str) -> TokenRegion {
        TokenRegion {
            bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            tokens: vec![first.into(), "more".into()],
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_token("Fig."), "fig");
        assert_eq!(normalize_token("Table3:"), "table");
        assert_eq!(normalize_token("TBL"), "tbl");
        assert_eq!(normalize_token("The"), "the");
    }

    #[test]
    fn caption_rules() {
        let dets = vec![
            det(BODY_TEXT, [0, 0, 10, 10], 0.7),
            det(BODY_TEXT, [0, 20, 10, 30], 0.6),
            det(BODY_TEXT, [0, 40, 10, 50], 0.5),
            det(FIGURE, [0, 60, 10, 70], 0.9),
            det(BODY_TEXT, [0, 80, 10, 90], 0.4),
        ];
        let side = vec![
            tokens([0, 0, 10, 10], "Figure"),
            tokens([0, 20, 10, 30], "Table"),
            tokens([0, 40, 10, 50], "The"),
            tokens([0, 60, 10, 70], "Figure"),
            tokens([0, 80, 10, 90], "Tables"),
        ];
        let out = reclassify_captions(&dets, &side);
        let classes: Vec<&str> = out.iter().map(|d| d.class.as_str()).collect();
        assert_eq!(
            classes,
            [FIGURE_CAPTION, TABLE_CAPTION, BODY_TEXT, FIGURE, BODY_TEXT]
        );
        for (a, b) in out.iter().zip(&dets) {
            assert_eq!((a.bbox, a.score), (b.bbox, b.score));
        }
    }

    #[test]
    fn figure_merging() {
        let one = vec![det(FIGURE, [0, 0, 10, 10], 0.5)];
        assert_eq!(merge_figures(&one), one);

        let stacked = vec![
            det(FIGURE, [0, 0, 50, 20], 0.4),
            det(FIGURE, [0, 30, 50, 60], 0.9),
        ];
        assert_eq!(
            merge_figures(&stacked),
            vec![det(FIGURE, [0, 0, 50, 60], 0.9)]
        );

        let blocked = vec![
            det(FIGURE, [0, 0, 50, 20], 0.4),
            det(BODY_TEXT, [0, 22, 50, 28], 0.8),
            det(FIGURE, [0, 30, 50, 60], 0.9),
        ];
        assert_eq!(merge_figures(&blocked).len(), 3);
    }

    #[test]
    fn table_merging() {
        let with_eq = vec![
            det(TABLE, [0, 0, 50, 20], 0.7),
            det(EQUATION, [0, 22, 50, 28], 0.8),
            det(TABLE, [0, 30, 50, 60], 0.6),
        ];
        assert_eq!(
            merge_tables(&with_eq),
            vec![det(TABLE, [0, 0, 50, 60], 0.7)]
        );

        let with_body = vec![
            det(TABLE, [0, 0, 50, 20], 0.7),
            det(BODY_TEXT, [0, 22, 50, 28], 0.8),
            det(TABLE, [0, 30, 50, 60], 0.6),
        ];
        assert_eq!(merge_tables(&with_body).len(), 3);

        let none = vec![
            det(FIGURE, [0, 0, 5, 5], 0.3),
            det(BODY_TEXT, [0, 10, 5, 15], 0.2),
        ];
        assert_eq!(merge_tables(&none), none);
    }
}
