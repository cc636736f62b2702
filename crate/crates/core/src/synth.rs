//! Synthetic document pages with known layout.
//!
//! Regions are stacked in one to three columns, each class drawn with its own
//! texture. Every texture inks all four edges of its box, so the drawn box is
//! the ground truth. Regions come in groups of one or two: the two regions of
//! a linked pair sit closer than the neighbor distance, all other regions
//! further apart, and each group carries its own mark: a tinted vertical
//! band at one of `group_marks` slots across the region's width.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    read_json, write_json, Annotation, PageAnnotations, TokenRegion, TokenSidecar,
};
use crate::classes::{
    ClassVocab, BODY_TEXT, DEFAULT_CLASS_COUNTS, EQUATION, FIGURE, FIGURE_CAPTION, PAGE_FOOTER,
    PAGE_HEADER, REFERENCE_TEXT, SECTION_HEADER, TABLE, TABLE_CAPTION,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::page::GrayPage;
use crate::seeds::page_seed;

/// Widest blank gap any texture leaves inside its own box.
pub const MAX_INNER_GAP: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureParams {
    /// Body text line thickness and line pitch.
    pub text_line_height: u32,
    pub text_line_pitch: u32,
    pub reference_line_height: u32,
    pub reference_line_pitch: u32,
    /// Caption lines; also used for the context-pair caption-look regions.
    pub caption_line_height: u32,
    pub caption_line_pitch: u32,
    /// Probability that an equation glyph slot is filled.
    pub equation_glyph_density: f64,
    /// Fraction of a figure's interior covered by marks.
    pub figure_fill: f64,
    pub table_row_pitch: u32,
    /// Rule under every table row instead of only under the header.
    pub table_row_rules: bool,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            text_line_height: 5,
            text_line_pitch: 9,
            reference_line_height: 3,
            reference_line_pitch: 7,
            caption_line_height: 4,
            caption_line_pitch: 8,
            equation_glyph_density: 0.8,
            figure_fill: 0.3,
            table_row_pitch: 7,
            table_row_rules: false,
        }
    }
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        for (key, h, p) in [
            ("text", self.text_line_height, self.text_line_pitch),
            (
                "reference",
                self.reference_line_height,
                self.reference_line_pitch,
            ),
            ("caption", self.caption_line_height, self.caption_line_pitch),
        ] {
            if h < 3 || p <= h || 2 * (p - h) > MAX_INNER_GAP {
                return Err(Error::Config(format!(
                    "synth.textures.{key}_line_*: need height ≥ 3 and 0 < 2·(pitch − height) ≤ {MAX_INNER_GAP}"
                )));
            }
        }
        if !(5..=MAX_INNER_GAP + 4).contains(&self.table_row_pitch) {
            return Err(Error::Config(
                "synth.textures.table_row_pitch must be in 5..=14".into(),
            ));
        }
        for (key, v) in [
            ("equation_glyph_density", self.equation_glyph_density),
            ("figure_fill", self.figure_fill),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "synth.textures.{key} must be in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub page_width: u32,
    pub page_height: u32,
    pub margin: u32,
    /// Blank space between columns.
    pub gutter: u32,
    /// Relative frequency of one-, two- and three-column pages.
    pub column_weights: [f64; 3],
    /// Inclusive range of regions per page, by column count.
    pub region_counts: [[u32; 2]; 3],
    pub class_weights: BTreeMap<String, f64>,
    /// Probability that a caption's first token names its kind ("Figure", "Table").
    pub caption_token_prob: f64,
    /// Emit caption-look regions labeled by adjacency alone.
    pub context_pairs: bool,
    /// Inclusive range of the blank gap inside a linked pair.
    pub pair_gap: [u32; 2],
    /// Inclusive range of the blank gap between groups.
    pub block_gap: [u32; 2],
    /// Probability of linking two remaining single regions.
    pub link_prob: f64,
    /// Number of mark slots; a page holds at most this many groups.
    pub group_marks: usize,
    /// Paper tint of the mark band.
    pub mark_tint: u8,
    /// Mean region height to keep per page, above the grid's redivision trigger.
    pub min_mean_height: u32,
    pub seed: u64,
    pub textures: TextureParams,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            page_width: 600,
            page_height: 800,
            margin: 40,
            gutter: 48,
            column_weights: [0.5, 0.4, 0.1],
            region_counts: [[3, 7], [5, 10], [6, 11]],
            class_weights: DEFAULT_CLASS_COUNTS
                .iter()
                .map(|(c, n)| (c.to_string(), f64::from(*n)))
                .collect(),
            caption_token_prob: 0.9,
            context_pairs: false,
            pair_gap: [16, 19],
            block_gap: [24, 36],
            link_prob: 1.0,
            group_marks: 6,
            mark_tint: 128,
            min_mean_height: 54,
            seed: 0,
            textures: TextureParams::default(),
        }
    }
}

impl LayoutSpec {
    /// The caption-look corpus: figure or paragraph anchors, each with one
    /// caption-look neighbor.
    pub fn context_pairs() -> Self {
        Self {
            context_pairs: true,
            column_weights: [0.5, 0.5, 0.0],
            region_counts: [[4, 6], [6, 10], [8, 12]],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.textures.validate()?;
        let vocab = ClassVocab::default();
        for (class, w) in &self.class_weights {
            if !vocab.contains(class) {
                return Err(Error::UnknownClass(class.clone()));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!(
                    "synth.class_weights: `{class}` must be non-negative"
                )));
            }
        }
        if !self.class_weights.values().any(|w| *w > 0.0) {
            return Err(Error::Config(
                "synth.class_weights: all weights are zero".into(),
            ));
        }
        if self
            .column_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || !self.column_weights.iter().any(|w| *w > 0.0)
        {
            return Err(Error::Config(
                "synth.column_weights must be non-negative, not all zero".into(),
            ));
        }
        for [lo, hi] in self.region_counts {
            if lo == 0 || lo > hi {
                return Err(Error::Config(
                    "synth.region_counts: need 1 ≤ low ≤ high".into(),
                ));
            }
        }
        for (key, [lo, hi]) in [("pair_gap", self.pair_gap), ("block_gap", self.block_gap)] {
            if lo > hi {
                return Err(Error::Config(format!("synth.{key}: low exceeds high")));
            }
        }
        if self.pair_gap[1] >= self.block_gap[0] {
            return Err(Error::Config(
                "synth.pair_gap must stay below synth.block_gap".into(),
            ));
        }
        if !(1..=12).contains(&self.group_marks) {
            return Err(Error::Config("synth.group_marks must be in 1..=12".into()));
        }
        if self.mark_tint < 128 {
            return Err(Error::Config("synth.mark_tint must be ≥ 128".into()));
        }
        for (key, p) in [
            ("caption_token_prob", self.caption_token_prob),
            ("link_prob", self.link_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synth.{key} must be in [0, 1]")));
            }
        }
        for (c, w) in self.column_weights.iter().enumerate() {
            if *w > 0.0 && self.column_width(c as u32 + 1).is_none_or(|cw| cw < 60) {
                return Err(Error::InfeasibleLayout(format!(
                    "{} columns need at least 60 px each on a {} px page",
                    c + 1,
                    self.page_width
                )));
            }
        }
        if self.page_height < 2 * self.margin + 300 {
            return Err(Error::InfeasibleLayout(format!(
                "page height {} leaves under 300 px of content",
                self.page_height
            )));
        }
        Ok(())
    }

    /// Checks that pairs stay neighbors and everything else stays apart
    /// under row threshold `r` and neighbor distance `delta`.
    pub fn check_separation(&self, r: u32, delta: u32) -> Result<()> {
        if self.pair_gap[0] < r || MAX_INNER_GAP >= r {
            return Err(Error::Config(format!(
                "synth.pair_gap must be ≥ R = {r}, and R must exceed {MAX_INNER_GAP}"
            )));
        }
        if self.pair_gap[1] >= delta || self.block_gap[0] < delta || self.gutter < delta {
            return Err(Error::Config(format!(
                "synth: need pair_gap < delta = {delta} ≤ block_gap and gutter"
            )));
        }
        Ok(())
    }

    fn column_width(&self, columns: u32) -> Option<u32> {
        let content = self.page_width.checked_sub(2 * self.margin)?;
        let gutters = (columns - 1) * self.gutter;
        content.checked_sub(gutters).map(|w| w / columns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Body,
    Reference,
    SectionHeader,
    PageHeader,
    PageFooter,
    Equation,
    Figure,
    Table,
    Caption,
    Other,
}

fn texture_of(class: &str) -> Texture {
    match class {
        BODY_TEXT => Texture::Body,
        REFERENCE_TEXT => Texture::Reference,
        SECTION_HEADER => Texture::SectionHeader,
        PAGE_HEADER => Texture::PageHeader,
        PAGE_FOOTER => Texture::PageFooter,
        EQUATION => Texture::Equation,
        FIGURE => Texture::Figure,
        TABLE => Texture::Table,
        FIGURE_CAPTION | TABLE_CAPTION => Texture::Caption,
        _ => Texture::Other,
    }
}

/// Heights `base + step·k` for `k` in `[k_min, k_max]`; natural draws stop at `k_nat`.
#[derive(Debug, Clone, Copy)]
struct Shape {
    base: i64,
    step: u32,
    k_min: u32,
    k_nat: u32,
    k_max: u32,
}

impl Shape {
    fn fixed(h: u32) -> Self {
        Self {
            base: i64::from(h),
            step: 0,
            k_min: 0,
            k_nat: 0,
            k_max: 0,
        }
    }

    fn height(&self, k: u32) -> u32 {
        (self.base + i64::from(self.step * k)) as u32
    }
}

/// `k` lines of thickness `t` at pitch `p`: `k·p − (p − t)` tall.
fn lines_shape(t: u32, p: u32, k_min: u32, k_nat: u32, k_max: u32) -> Shape {
    Shape {
        base: i64::from(t) - i64::from(p),
        step: p,
        k_min,
        k_nat,
        k_max,
    }
}

fn shape(texture: Texture, tex: &TextureParams) -> Shape {
    match texture {
        Texture::Body => lines_shape(tex.text_line_height, tex.text_line_pitch, 3, 14, 60),
        Texture::Reference => {
            let entry = tex.reference_line_pitch + tex.reference_line_height;
            let gap = 2 * (tex.reference_line_pitch - tex.reference_line_height);
            lines_shape(entry, entry + gap, 2, 6, 24)
        }
        Texture::Caption => lines_shape(tex.caption_line_height, tex.caption_line_pitch, 2, 4, 8),
        Texture::SectionHeader => Shape::fixed(11),
        Texture::PageHeader | Texture::PageFooter => Shape::fixed(12),
        Texture::Equation => Shape {
            base: 18,
            step: 4,
            k_min: 1,
            k_nat: 4,
            k_max: 10,
        },
        Texture::Figure => Shape {
            base: 0,
            step: 1,
            k_min: 80,
            k_nat: 200,
            k_max: 600,
        },
        Texture::Table => Shape {
            base: 17,
            step: tex.table_row_pitch,
            k_min: 4,
            k_nat: 12,
            k_max: 60,
        },
        Texture::Other => Shape {
            base: 10,
            step: 8,
            k_min: 3,
            k_nat: 8,
            k_max: 40,
        },
    }
}

#[derive(Debug, Clone)]
struct Item {
    class: String,
    texture: Texture,
    shape: Shape,
    k: u32,
    caption_look: bool,
}

impl Item {
    fn new<R: Rng>(class: &str, texture: Texture, tex: &TextureParams, rng: &mut R) -> Self {
        let shape = shape(texture, tex);
        Self {
            class: class.to_string(),
            texture,
            shape,
            k: rng.random_range(shape.k_min..=shape.k_nat),
            caption_look: false,
        }
    }

    fn height(&self) -> u32 {
        self.shape.height(self.k)
    }
}

/// One group of regions, stacked top to bottom.
#[derive(Debug, Clone)]
struct Unit {
    items: Vec<Item>,
    /// Blank rows between consecutive items (linked pairs only).
    gaps: Vec<u32>,
}

impl Unit {
    fn height(&self) -> u32 {
        self.items.iter().map(Item::height).sum::<u32>() + self.gaps.iter().sum::<u32>()
    }
}

/// Where a region landed and how it was printed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacedRegion {
    pub class: String,
    pub bbox: BBox,
    pub group: usize,
    /// Mark slot of the region's group.
    pub mark: usize,
    /// Drawn with the caption texture but labeled by adjacency.
    pub caption_look: bool,
    /// Column index; `None` for full-width page headers and footers.
    pub column: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageLayout {
    pub page_id: String,
    pub seed: u64,
    pub columns: u32,
    /// Regions drawn but left out because the page ran out of room.
    pub dropped: usize,
    pub regions: Vec<PlacedRegion>,
}

#[derive(Debug, Clone)]
pub struct SynthPage {
    pub image: GrayPage,
    pub annotations: PageAnnotations,
    pub tokens: TokenSidecar,
    pub layout: PageLayout,
}

fn range<R: Rng>(rng: &mut R, [lo, hi]: [u32; 2]) -> u32 {
    rng.random_range(lo..=hi)
}

/// Groups the body regions of a default page: captions go with a figure or
/// table when one is available, then singles are linked until the page fits
/// `budget` groups, then at random.
fn pair_up<R: Rng>(
    mut items: Vec<Item>,
    budget: usize,
    spec: &LayoutSpec,
    rng: &mut R,
) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    let take = |items: &mut Vec<Item>, class: &str| {
        items
            .iter()
            .position(|i| i.class == class)
            .map(|p| items.remove(p))
    };
    while let Some(cap) = take(&mut items, FIGURE_CAPTION) {
        match take(&mut items, FIGURE) {
            Some(fig) => units.push(Unit {
                items: vec![fig, cap],
                gaps: vec![range(rng, spec.pair_gap)],
            }),
            None => units.push(Unit {
                items: vec![cap],
                gaps: vec![],
            }),
        }
    }
    while let Some(cap) = take(&mut items, TABLE_CAPTION) {
        match take(&mut items, TABLE) {
            Some(table) => units.push(Unit {
                items: vec![cap, table],
                gaps: vec![range(rng, spec.pair_gap)],
            }),
            None => units.push(Unit {
                items: vec![cap],
                gaps: vec![],
            }),
        }
    }
    items.shuffle(rng);
    let mut singles: Vec<Unit> = items
        .into_iter()
        .map(|i| Unit {
            items: vec![i],
            gaps: vec![],
        })
        .collect();
    singles.extend(units.iter().filter(|u| u.items.len() == 1).cloned());
    units.retain(|u| u.items.len() == 2);
    singles.shuffle(rng);
    let mut out = units;
    let mut rest = Vec::new();
    let mut i = 0;
    while i < singles.len() {
        let remaining_groups = out.len() + rest.len() + (singles.len() - i);
        let must = remaining_groups > budget;
        if i + 1 < singles.len() && (must || rng.random_bool(spec.link_prob)) {
            let mut items = singles[i].items.clone();
            items.extend(singles[i + 1].items.iter().cloned());
            out.push(Unit {
                items,
                gaps: vec![range(rng, spec.pair_gap)],
            });
            i += 2;
        } else {
            rest.push(singles[i].clone());
            i += 1;
        }
    }
    out.extend(rest);
    out.shuffle(rng);
    out
}

/// Anchor-plus-caption-look units of the context-pair corpus.
fn context_units<R: Rng>(n_regions: u32, spec: &LayoutSpec, rng: &mut R) -> Vec<Unit> {
    let n_units = (n_regions / 2).clamp(1, spec.group_marks as u32);
    (0..n_units)
        .map(|_| {
            let figure = rng.random_bool(0.5);
            let anchor = if figure {
                Item::new(FIGURE, Texture::Figure, &spec.textures, rng)
            } else {
                let mut a = Item::new(BODY_TEXT, Texture::Body, &spec.textures, rng);
                a.k = rng.random_range(6..=a.shape.k_nat);
                a
            };
            let mut look = Item::new(
                if figure { FIGURE_CAPTION } else { BODY_TEXT },
                Texture::Caption,
                &spec.textures,
                rng,
            );
            look.caption_look = true;
            let items = if rng.random_bool(0.5) {
                vec![anchor, look]
            } else {
                vec![look, anchor]
            };
            Unit {
                items,
                gaps: vec![range(rng, spec.pair_gap)],
            }
        })
        .collect()
}

fn column_total(units: &[Unit], gaps: &[u32]) -> u32 {
    units.iter().map(Unit::height).sum::<u32>()
        + gaps.iter().take(units.len().saturating_sub(1)).sum::<u32>()
}

/// Shrinks flexible regions of a column until it fits `avail`.
fn shrink_to_fit(units: &mut [Unit], gaps: &[u32], avail: u32) -> bool {
    while column_total(units, gaps) > avail {
        let slack = |it: &Item| (it.k - it.shape.k_min) * it.shape.step;
        let best = units
            .iter_mut()
            .flat_map(|u| u.items.iter_mut())
            .filter(|it| it.k > it.shape.k_min)
            .max_by_key(|it| slack(it));
        match best {
            Some(it) => it.k -= 1,
            None => return false,
        }
    }
    true
}

/// Layout draws per page before settling for one below `min_mean_height`.
pub const MAX_LAYOUT_ATTEMPTS: usize = 16;

/// Draws one synthetic page. A draw whose mean region height stays below
/// `min_mean_height` after growing its flexible regions is redrawn.
pub fn generate_page(spec: &LayoutSpec, seed: u64, page_id: &str) -> Result<SynthPage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 1;
    loop {
        let (page, tall_enough) = draw_page(spec, seed, page_id, &mut rng)?;
        if tall_enough || attempt == MAX_LAYOUT_ATTEMPTS {
            return Ok(page);
        }
        attempt += 1;
    }
}

fn draw_page(
    spec: &LayoutSpec,
    seed: u64,
    page_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(SynthPage, bool)> {
    let tex = &spec.textures;
    let columns = WeightedIndex::new(spec.column_weights)
        .map_err(|e| Error::Config(format!("synth.column_weights: {e}")))?
        .sample(rng) as u32
        + 1;
    let cw = spec.column_width(columns).expect("validated");
    let n_regions = range(rng, spec.region_counts[columns as usize - 1]);
    let palette = spec.group_marks;

    let (mut top, mut bottom) = (Vec::new(), Vec::new());
    let mut dropped = 0;
    let units = if spec.context_pairs {
        context_units(n_regions, spec, rng)
    } else {
        let names: Vec<&String> = spec.class_weights.keys().collect();
        let weights = WeightedIndex::new(spec.class_weights.values().copied())
            .map_err(|e| Error::Config(format!("synth.class_weights: {e}")))?;
        let mut body = Vec::new();
        for _ in 0..n_regions {
            let class = names[weights.sample(rng)].as_str();
            let item = Item::new(class, texture_of(class), tex, rng);
            match class {
                PAGE_HEADER => top.push(item),
                PAGE_FOOTER => bottom.push(item),
                _ => body.push(item),
            }
        }
        while top.len() + bottom.len() + body.len().div_ceil(2) > palette {
            dropped += 1;
            if body.len() > 1 {
                body.pop();
            } else if bottom.len() > top.len() {
                bottom.pop();
            } else {
                top.pop();
            }
        }
        let budget = palette - top.len() - bottom.len();
        pair_up(body, budget, spec, rng)
    };

    // Vertical extent left for the columns.
    let mut y_top = spec.margin;
    let mut top_gaps = Vec::new();
    for it in &top {
        let g = range(rng, spec.block_gap);
        top_gaps.push(g);
        y_top += it.height() + g;
    }
    let mut y_bottom = spec.page_height - spec.margin;
    let mut bottom_gaps = Vec::new();
    for it in &bottom {
        let g = range(rng, spec.block_gap);
        bottom_gaps.push(g);
        y_bottom = y_bottom.saturating_sub(it.height() + g);
    }
    if y_bottom <= y_top + 100 {
        return Err(Error::InfeasibleLayout(format!(
            "{page_id}: headers and footers leave no room"
        )));
    }
    let avail = y_bottom - y_top;

    // Deal units to columns in order, about equal heights per column.
    let block_gaps: Vec<u32> = (0..units.len().max(1))
        .map(|_| range(rng, spec.block_gap))
        .collect();
    let total: u32 = units.iter().map(|u| u.height() + spec.block_gap[0]).sum();
    let target = total / columns;
    let mut cols: Vec<Vec<Unit>> = vec![Vec::new(); columns as usize];
    let mut c = 0;
    let mut filled = 0;
    for u in units {
        if filled > 0 && filled + u.height() / 2 > target && c + 1 < columns as usize {
            c += 1;
            filled = 0;
        }
        filled += u.height() + spec.block_gap[0];
        cols[c].push(u);
    }
    for c in 0..cols.len() {
        while !shrink_to_fit(&mut cols[c], &block_gaps, avail) {
            let u = cols[c].pop().expect("an unfitting column is non-empty");
            let spare = (0..cols.len()).filter(|&o| o != c).find(|&o| {
                let mut trial = cols[o].clone();
                trial.push(u.clone());
                shrink_to_fit(&mut trial, &block_gaps, avail)
            });
            match spare {
                Some(o) => cols[o].push(u),
                None => dropped += u.items.len(),
            }
        }
    }

    // Grow flexible regions until the mean height clears the threshold.
    let count =
        top.len() + bottom.len() + cols.iter().flatten().map(|u| u.items.len()).sum::<usize>();
    let mut tall_enough = count == 0;
    if count > 0 {
        let fixed: u32 = top.iter().chain(&bottom).map(Item::height).sum();
        loop {
            let sum = fixed
                + cols
                    .iter()
                    .flatten()
                    .flat_map(|u| &u.items)
                    .map(Item::height)
                    .sum::<u32>();
            if sum >= spec.min_mean_height * count as u32 {
                tall_enough = true;
                break;
            }
            let mut candidates = Vec::new();
            for (c, col) in cols.iter().enumerate() {
                let slack = avail.saturating_sub(column_total(col, &block_gaps));
                for (u, unit) in col.iter().enumerate() {
                    for (i, it) in unit.items.iter().enumerate() {
                        if it.k < it.shape.k_max && it.shape.step > 0 && it.shape.step <= slack {
                            candidates.push((c, u, i));
                        }
                    }
                }
            }
            let Some(&(c, u, i)) = candidates.get(rng.random_range(0..candidates.len().max(1)))
            else {
                break;
            };
            cols[c][u].items[i].k += 1;
        }
    }

    // Place everything.
    let content_w = spec.page_width - 2 * spec.margin;
    let mut placed: Vec<(Item, BBox, usize, Option<u32>)> = Vec::new();
    let mut group = 0;
    let mut y = spec.margin;
    for (it, g) in top.into_iter().zip(&top_gaps) {
        let h = it.height();
        placed.push((it, bbox(spec.margin, y, content_w, h), group, None));
        group += 1;
        y += h + g;
    }
    let mut y = spec.page_height - spec.margin;
    for (it, g) in bottom.into_iter().zip(&bottom_gaps) {
        let h = it.height();
        placed.push((it, bbox(spec.margin, y - h, content_w, h), group, None));
        group += 1;
        y -= h + g;
    }
    for (c, col) in cols.into_iter().enumerate() {
        let x0 = spec.margin + c as u32 * (cw + spec.gutter);
        let mut y = y_top;
        for (u, unit) in col.into_iter().enumerate() {
            let gaps = unit.gaps.clone();
            for (i, it) in unit.items.into_iter().enumerate() {
                let h = it.height();
                let narrow = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
                    ((cw as f64 * rng.random_range(lo..hi)) as u32).clamp(40, cw)
                };
                let (x, w) = match it.texture {
                    Texture::SectionHeader => (x0, narrow(0.25, 0.6, rng)),
                    Texture::Equation => {
                        let w = narrow(0.4, 0.8, rng);
                        (x0 + (cw - w) / 2, w)
                    }
                    _ => (x0, cw),
                };
                placed.push((it, bbox(x, y, w, h), group, Some(c as u32)));
                y += h + gaps.get(i).copied().unwrap_or(0);
            }
            y += block_gaps[u];
            group += 1;
        }
    }

    let mut marks: Vec<usize> = (0..palette).collect();
    marks.shuffle(rng);
    placed.sort_by_key(|(_, b, _, _)| b.reading_key());

    let mut image = GrayPage::filled(spec.page_width, spec.page_height, 255)?;
    let mut regions = Vec::with_capacity(placed.len());
    let mut annotations = Vec::with_capacity(placed.len());
    let mut tokens = Vec::with_capacity(placed.len());
    let mut counters = Counters::default();
    for (it, b, g, column) in placed {
        let mark = marks[g % palette];
        let (x0, w) = (b.x0() as usize, b.width() as usize);
        let band = [x0 + w * mark / palette, x0 + w * (mark + 1) / palette];
        image.fill_rect(
            band[0] as u32,
            b.y0(),
            band[1] as u32,
            b.y1(),
            spec.mark_tint,
        );
        draw(&mut image, &it, &b, 0, tex, rng);
        tokens.push(TokenRegion {
            bbox: b,
            tokens: region_tokens(&it, spec.caption_token_prob, &mut counters, rng),
        });
        annotations.push(Annotation {
            class: it.class.clone(),
            bbox: b,
        });
        regions.push(PlacedRegion {
            class: it.class,
            bbox: b,
            group: g,
            mark,
            caption_look: it.caption_look,
            column,
        });
    }
    let page = SynthPage {
        image,
        annotations: PageAnnotations {
            page_id: page_id.to_string(),
            size: [spec.page_width, spec.page_height],
            annotations,
        },
        tokens,
        layout: PageLayout {
            page_id: page_id.to_string(),
            seed,
            columns,
            dropped,
            regions,
        },
    };
    Ok((page, tall_enough))
}

fn bbox(x: u32, y: u32, w: u32, h: u32) -> BBox {
    BBox::new(x, y, x + w, y + h).expect("positive region size")
}

// ---------------------------------------------------------------- textures

fn rect(p: &mut GrayPage, x0: u32, y0: u32, x1: u32, y1: u32, v: u8) {
    if x0 < x1 && y0 < y1 {
        p.fill_rect(x0, y0, x1, y1, v);
    }
}

/// A line of word segments from `x0` to `x1`, gaps of 3 px, every segment at
/// least 3 px wide.
fn word_line<R: Rng>(p: &mut GrayPage, x0: u32, x1: u32, y: u32, t: u32, v: u8, rng: &mut R) {
    let mut x = x0;
    while x < x1 {
        let mut end = (x + rng.random_range(8..=40)).min(x1);
        if x1 - end < 6 {
            end = x1;
        }
        rect(p, x, y, end, y + t, v);
        x = end + 3;
    }
}

/// `k` lines of thickness `t` at pitch `pitch`; the first spans the box, the
/// last is shorter.
fn paragraph<R: Rng>(p: &mut GrayPage, b: &BBox, t: u32, pitch: u32, v: u8, rng: &mut R) {
    let k = (b.height() + pitch - t) / pitch;
    for i in 0..k {
        let y = b.y0() + i * pitch;
        let end = if i + 1 == k && k > 1 {
            b.x0() + (b.width() as f64 * rng.random_range(0.35..0.9)) as u32
        } else {
            b.x1()
        };
        word_line(p, b.x0(), end.max(b.x0() + 3), y, t, v, rng);
    }
}

fn frame(p: &mut GrayPage, b: &BBox, t: u32, v: u8) {
    rect(p, b.x0(), b.y0(), b.x1(), b.y0() + t, v);
    rect(p, b.x0(), b.y1() - t, b.x1(), b.y1(), v);
    rect(p, b.x0(), b.y0(), b.x0() + t, b.y1(), v);
    rect(p, b.x1() - t, b.y0(), b.x1(), b.y1(), v);
}

fn draw<R: Rng>(p: &mut GrayPage, it: &Item, b: &BBox, v: u8, tex: &TextureParams, rng: &mut R) {
    let (x0, y0, x1, y1) = (b.x0(), b.y0(), b.x1(), b.y1());
    let w = b.width();
    match it.texture {
        Texture::Body => paragraph(p, b, tex.text_line_height, tex.text_line_pitch, v, rng),
        Texture::Caption => {
            let (t, pitch) = (tex.caption_line_height, tex.caption_line_pitch);
            let label = rng.random_range(18..=26).min(w / 3);
            rect(p, x0, y0, x0 + label, y0 + t + 2, v);
            word_line(p, x0 + label + 4, x1, y0, t, v, rng);
            let k = (b.height() + pitch - t) / pitch;
            for i in 1..k {
                let y = y0 + i * pitch;
                if i + 1 == k {
                    let lw = ((w as f64 * rng.random_range(0.35..0.75)) as u32).max(3);
                    let lx = x0 + (w - lw) / 2;
                    word_line(p, lx, lx + lw, y, t, v, rng);
                } else {
                    word_line(p, x0, x1, y, t, v, rng);
                }
            }
        }
        Texture::Reference => {
            let (t, pitch) = (tex.reference_line_height, tex.reference_line_pitch);
            let entry = pitch + t + 2 * (pitch - t);
            let k = (b.height() + 2 * (pitch - t)) / entry;
            for e in 0..k {
                let y = y0 + e * entry;
                rect(p, x0, y, x0 + 10, y + t, v);
                word_line(p, x0 + 13, x1, y, t, v, rng);
                let end = x0 + 14 + ((w - 14) as f64 * rng.random_range(0.3..1.0)) as u32;
                word_line(p, x0 + 14, end.max(x0 + 17), y + pitch, t, v, rng);
            }
        }
        Texture::SectionHeader => {
            let num = rng.random_range(10..=14).min(w / 4);
            rect(p, x0, y0, x0 + num, y1, v);
            word_line(p, x0 + num + 3, x1, y0 + 2, b.height() - 4, v, rng);
        }
        Texture::PageHeader => {
            let title = (w as f64 * rng.random_range(0.3..0.5)) as u32;
            rect(p, x0, y0, x0 + title, y0 + 6, v);
            rect(p, x1 - 14, y0, x1, y0 + 6, v);
            rect(p, x0, y1 - 2, x1, y1, v);
        }
        Texture::PageFooter => {
            rect(p, x0, y0, x1, y0 + 2, v);
            let nw = rng.random_range(10..=20);
            let cx = x0 + (w - nw) / 2;
            rect(p, cx, y1 - 6, cx + nw, y1, v);
        }
        Texture::Equation => {
            let g = (b.height() - 2) / 2;
            let bar = y0 + g;
            rect(p, x0, bar, x1, bar + 2, v);
            for above in [true, false] {
                let mut x = x0 + rng.random_range(0..=w / 6);
                let mut first = true;
                while x + 4 <= x1 {
                    let gw = rng.random_range(4..=8).min(x1 - x);
                    if first || rng.random_bool(tex.equation_glyph_density) {
                        let gh = if first {
                            g
                        } else {
                            rng.random_range(g / 2..=g)
                        };
                        if above {
                            rect(p, x, bar - gh, x + gw, bar, v);
                        } else {
                            rect(p, x, bar + 2, x + gw, bar + 2 + gh, v);
                        }
                        first = false;
                    }
                    x += gw + rng.random_range(2..=4);
                }
            }
        }
        Texture::Figure => {
            frame(p, b, 2, v);
            let (ix0, iy0, ix1, iy1) = (x0 + 6, y0 + 6, x1 - 6, y1 - 6);
            let (iw, ih) = (ix1 - ix0, iy1 - iy0);
            match rng.random_range(0..3) {
                0 => {
                    let mut x = ix0 + rng.random_range(0..8);
                    while x + 6 <= ix1 {
                        let bw = rng.random_range(6..=12).min(ix1 - x);
                        let bh =
                            ((ih as f64) * rng.random_range(0.2..1.0) * (0.5 + tex.figure_fill))
                                .min(ih as f64) as u32;
                        rect(p, x, iy1 - bh.max(3), x + bw, iy1, v);
                        x += bw + rng.random_range(4..=10);
                    }
                }
                1 => {
                    rect(p, ix0, iy1 - 2, ix1, iy1, v);
                    rect(p, ix0, iy0, ix0 + 2, iy1, v);
                    let dots = ((iw * ih) as f64 * tex.figure_fill / 30.0) as u32;
                    for _ in 0..dots {
                        let dx = rng.random_range(ix0 + 4..ix1 - 3);
                        let dy = rng.random_range(iy0..iy1 - 5);
                        rect(p, dx, dy, dx + 3, dy + 3, v);
                    }
                }
                _ => {
                    let blocks = rng.random_range(2..=5);
                    for _ in 0..blocks {
                        let bw = ((iw as f64)
                            * rng.random_range(0.2..0.6)
                            * (0.5 + tex.figure_fill)) as u32;
                        let bh = ((ih as f64)
                            * rng.random_range(0.2..0.6)
                            * (0.5 + tex.figure_fill)) as u32;
                        let (bw, bh) = (bw.clamp(4, iw), bh.clamp(4, ih));
                        let bx = rng.random_range(ix0..=ix1 - bw);
                        let by = rng.random_range(iy0..=iy1 - bh);
                        for yy in (by..by + bh).step_by(4) {
                            rect(p, bx, yy, bx + bw, (yy + 2).min(by + bh), v);
                        }
                        rect(p, bx, by, bx + 2, by + bh, v);
                    }
                }
            }
        }
        Texture::Table => {
            let pitch = tex.table_row_pitch;
            let rows = (b.height() - 17) / pitch;
            let ncols = rng.random_range(2..=6).min(w / 20);
            let col_w = w / ncols;
            let cell_widths: Vec<f64> = (0..ncols).map(|_| rng.random_range(0.4..0.85)).collect();
            rect(p, x0, y0, x1, y0 + 2, v);
            for (c, f) in cell_widths.iter().enumerate() {
                let cx = x0 + c as u32 * col_w + 2;
                rect(
                    p,
                    cx,
                    y0 + 4,
                    cx + ((col_w as f64 * f) as u32).max(3),
                    y0 + 9,
                    v,
                );
            }
            rect(p, x0, y0 + 11, x1, y0 + 12, v);
            for r in 0..rows {
                let y = y0 + 12 + r * pitch + (pitch - 4);
                for (c, f) in cell_widths.iter().enumerate() {
                    let jitter = rng.random_range(0.6..1.0);
                    let cx = x0 + c as u32 * col_w + 2;
                    rect(
                        p,
                        cx,
                        y,
                        cx + ((col_w as f64 * f * jitter) as u32).max(3),
                        y + 4,
                        v,
                    );
                }
                if tex.table_row_rules && r + 1 < rows && pitch >= 7 {
                    rect(p, x0, y + 5, x1, y + 6, v);
                }
            }
            rect(p, x0, y1 - 2, x1, y1, v);
        }
        Texture::Other => {
            frame(p, b, 1, v);
            let k = (b.height() - 10) / 8;
            for i in 0..k {
                let y = y0 + 5 + i * 8;
                let end = x0 + 5 + ((w - 10) as f64 * rng.random_range(0.5..1.0)) as u32;
                word_line(p, x0 + 5, end, y, 3, v, rng);
            }
        }
    }
}

// ------------------------------------------------------------------ tokens

const WORDS: &[&str] = &[
    "the", "results", "show", "that", "layer", "samples", "were", "measured", "along", "with",
    "data", "from", "core", "sites", "model", "rates", "depth", "basin", "high", "low", "values",
    "field", "study", "across", "region", "flow", "observed", "during", "each", "period",
    "between", "mean", "water", "surface", "events", "trend", "these", "records", "suggest",
    "which", "grain", "size", "shelf", "slope", "units", "onset",
];

const NAMES: &[&str] = &[
    "Smith", "Chen", "Garcia", "Okafor", "Larsen", "Novak", "Silva", "Tanaka",
];

#[derive(Default)]
struct Counters {
    figure: u32,
    table: u32,
    section: u32,
    reference: u32,
}

fn words<R: Rng>(n: usize, capitalize: bool, rng: &mut R) -> Vec<String> {
    let mut out: Vec<String> = (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect();
    if capitalize {
        if let Some(first) = out.first_mut() {
            let mut c = first.chars();
            *first = c
                .next()
                .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
                .unwrap_or_default();
        }
    }
    out
}

fn region_tokens<R: Rng>(
    it: &Item,
    caption_prob: f64,
    n: &mut Counters,
    rng: &mut R,
) -> Vec<String> {
    let mut out = Vec::new();
    match (it.class.as_str(), it.texture) {
        (FIGURE_CAPTION, _) | (TABLE_CAPTION, _) => {
            if rng.random_bool(caption_prob) {
                let (word, num, sep) = if it.class == FIGURE_CAPTION {
                    n.figure += 1;
                    ("Figure", n.figure, ".")
                } else {
                    n.table += 1;
                    ("Table", n.table, ":")
                };
                out.push(word.to_string());
                out.push(format!("{num}{sep}"));
                out.extend(words(rng.random_range(5..=14), true, rng));
            } else {
                out.extend(words(rng.random_range(6..=15), true, rng));
            }
        }
        (_, Texture::Body) | (_, Texture::Caption) => {
            out.extend(words(rng.random_range(8..=30), true, rng))
        }
        (_, Texture::Reference) => {
            for _ in 0..it.k.max(1) {
                n.reference += 1;
                out.push(format!("[{}]", n.reference));
                out.push(format!("{},", NAMES[rng.random_range(0..NAMES.len())]));
                out.push(format!("{}.", rng.random_range(1980..=2020)));
                out.extend(words(rng.random_range(4..=8), true, rng));
            }
        }
        (_, Texture::SectionHeader) => {
            n.section += 1;
            out.push(format!("{}.", n.section));
            out.extend(words(rng.random_range(1..=3), true, rng));
        }
        (_, Texture::PageHeader) => out.extend(words(rng.random_range(3..=6), true, rng)),
        (_, Texture::PageFooter) => out.push(rng.random_range(1..=400).to_string()),
        (_, Texture::Equation) => {
            for s in ["x", "=", "a", "+", "b", "/", "c"] {
                out.push(s.to_string());
            }
        }
        (_, Texture::Table) => {
            for _ in 0..rng.random_range(6..=20) {
                out.push(format!("{:.2}", rng.random_range(0.0..100.0)));
            }
        }
        (_, Texture::Figure) => {}
        (_, Texture::Other) => out.extend(words(rng.random_range(4..=12), true, rng)),
    }
    out
}

// ------------------------------------------------------------------ corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    /// Paths relative to the corpus directory.
    pub image: String,
    pub annotations: String,
    pub tokens: String,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub spec: LayoutSpec,
    pub pages: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn page_id(index: usize) -> String {
    format!("page_{index:05}")
}

/// Writes `n` pages under `out`: `images/<id>.png`, `annotations/<id>.json`,
/// `tokens/<id>.json`, `layout/<id>.json` and `manifest.json`.
pub fn generate_corpus(spec: &LayoutSpec, n: usize, seed: u64, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "annotations", "tokens", "layout"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|source| Error::Write { path: dir, source })?;
    }
    let mut pages = Vec::with_capacity(n);
    for i in 0..n {
        let id = page_id(i);
        let s = page_seed(seed, i);
        let page = generate_page(spec, s, &id)?;
        let entry = ManifestEntry {
            image: format!("images/{id}.png"),
            annotations: format!("annotations/{id}.json"),
            tokens: format!("tokens/{id}.json"),
            layout: format!("layout/{id}.json"),
            id,
            seed: s,
        };
        page.image.save_png(&out.join(&entry.image))?;
        write_json(&out.join(&entry.annotations), &page.annotations)?;
        write_json(&out.join(&entry.tokens), &page.tokens)?;
        write_json(&out.join(&entry.layout), &page.layout)?;
        pages.push(entry);
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        pages,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

impl ManifestEntry {
    pub fn image_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.image)
    }

    pub fn annotations_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.annotations)
    }

    pub fn tokens_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.tokens)
    }

    pub fn layout_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::normalize_token;

    fn edges_inked(p: &GrayPage, b: &BBox) -> bool {
        let fg = |x: u32, y: u32| p.get(x, y) < 128;
        (b.x0()..b.x1()).any(|x| fg(x, b.y0()))
            && (b.x0()..b.x1()).any(|x| fg(x, b.y1() - 1))
            && (b.y0()..b.y1()).any(|y| fg(b.x0(), y))
            && (b.y0()..b.y1()).any(|y| fg(b.x1() - 1, y))
    }

    #[test]
    fn same_seed_same_page() {
        let spec = LayoutSpec::default();
        let a = generate_page(&spec, 11, "p").unwrap();
        let b = generate_page(&spec, 11, "p").unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
        assert_eq!(a.tokens, b.tokens);
        assert_ne!(generate_page(&spec, 12, "p").unwrap().image, a.image);
    }

    #[test]
    fn body_only_spec() {
        let mut spec = LayoutSpec::default();
        for (c, w) in spec.class_weights.iter_mut() {
            *w = if c == BODY_TEXT { 1.0 } else { 0.0 };
        }
        for seed in 0..20 {
            let page = generate_page(&spec, seed, "p").unwrap();
            assert!(!page.annotations.annotations.is_empty());
            assert!(page
                .annotations
                .annotations
                .iter()
                .all(|a| a.class == BODY_TEXT));
        }
    }

    #[test]
    fn boxes_are_exact_and_separated() {
        let spec = LayoutSpec::default();
        for seed in 0..40 {
            let page = generate_page(&spec, seed, "p").unwrap();
            let boxes: Vec<BBox> = page
                .annotations
                .annotations
                .iter()
                .map(|a| a.bbox)
                .collect();
            for (i, a) in boxes.iter().enumerate() {
                assert!(page.image.bounds().contains(a));
                assert!(edges_inked(&page.image, a), "seed {seed}: {a:?}");
                for b in &boxes[i + 1..] {
                    let dx = b
                        .x0()
                        .saturating_sub(a.x1())
                        .max(a.x0().saturating_sub(b.x1()));
                    let dy = b
                        .y0()
                        .saturating_sub(a.y1())
                        .max(a.y0().saturating_sub(b.y1()));
                    assert!(dx.max(dy) >= 16, "seed {seed}: {a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn groups_fit_the_palette() {
        let spec = LayoutSpec::default();
        for seed in 0..60 {
            let page = generate_page(&spec, seed, "p").unwrap();
            let groups: std::collections::BTreeSet<usize> =
                page.layout.regions.iter().map(|r| r.group).collect();
            assert!(groups.len() <= spec.group_marks);
            for g in groups {
                assert!(page.layout.regions.iter().filter(|r| r.group == g).count() <= 2);
            }
        }
    }

    #[test]
    fn body_words_never_trigger_caption_rules() {
        for w in WORDS {
            let n = normalize_token(w);
            assert!(
                !n.contains("fig") && !["table", "tab", "tbl"].contains(&n.as_str()),
                "{w}"
            );
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = LayoutSpec::default();
        spec.class_weights.values_mut().for_each(|w| *w = 0.0);
        assert!(spec.validate().is_err());
        let spec = LayoutSpec {
            page_width: 150,
            ..LayoutSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::InfeasibleLayout(_))));
        let mut spec = LayoutSpec::default();
        spec.class_weights.insert("Sidebar".into(), 1.0);
        assert!(matches!(spec.validate(), Err(Error::UnknownClass(_))));
        assert!(LayoutSpec::default().check_separation(15, 20).is_ok());
        assert!(LayoutSpec::default().check_separation(15, 16).is_err());
    }
}
