use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::{sigmoid, softplus, NnError, ParamSet};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over channel-major rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MaskMul(Var, Array2<f64>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<Array2<f64>>,
    },
    AvgPoolGrid {
        input: Var,
        channels: usize,
        h: usize,
        w: usize,
        grid: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MaskedSoftmaxRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    NceLoss(Var, Vec<bool>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Reverse-mode recording of a forward computation.
///
/// Every value is a 2-D matrix; per-sample feature maps are stored as one
/// flattened row per sample. A tape is built for one forward pass and then
/// consumed by [`Tape::backward`]; no graph outlives it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter name, shaped like the parameters.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Keeps only the gradients whose parameter name satisfies `keep`.
    pub fn retain<F: FnMut(&str) -> bool>(&mut self, mut keep: F) {
        self.grads.retain(|name, _| keep(name));
    }

    /// Adds every gradient into the matching parameter's gradient buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<(), NnError> {
        for (name, g) in &self.grads {
            params.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn as_matrix(value: &ArrayD<f64>) -> Array2<f64> {
    let shape = value.shape();
    let (rows, cols) = match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    };
    match value.as_slice() {
        Some(data) => Array2::from_shape_vec((rows, cols), data.to_vec()),
        None => Array2::from_shape_vec((rows, cols), value.iter().copied().collect()),
    }
    .expect("element count preserved")
}

fn add_grad(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn mismatch(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a parameter as a matrix: rank-1 tensors become one row,
    /// higher ranks flatten all trailing axes.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, NnError> {
        let t = params.get(name)?;
        let value = as_matrix(t.value());
        Ok(self.push(value, Op::Param(name.to_string(), t.shape().to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(mismatch("matmul", av, bv));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the usual dense-layer product with `[out, in]` weights.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(mismatch("matmul_bt", av, bv));
        }
        let out = av.dot(&bv.t());
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(mismatch("add_row", av, rv));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let out = av * bv;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Inverted dropout. With `rng == None` or `p == 0` the input handle is
    /// returned unchanged, so inference is an exact identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: Option<&mut R>,
    ) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Invalid(format!("dropout probability {p}")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = self.value(a).dim();
        let mut mask = Array2::zeros((r, c));
        for m in mask.iter_mut() {
            if rng.random::<f64>() >= p {
                *m = keep;
            }
        }
        let out = self.value(a) * &mask;
        Ok(self.push(out, Op::MaskMul(a, mask)))
    }

    /// Convolution over rows holding channel-major `[C, H, W]` maps.
    ///
    /// `kernel` is `[out_channels, in_channels·k·k]`, `bias` is `[1, out_channels]`.
    /// Output rows are channel-major `[out_channels, out_h, out_w]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    ) -> Result<Var, NnError> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        if x.ncols() != geom.in_len() {
            return Err(mismatch("conv2d input", x, k));
        }
        if k.nrows() != geom.out_channels || k.ncols() != geom.patch_len() {
            return Err(mismatch("conv2d kernel", x, k));
        }
        if b.nrows() != 1 || b.ncols() != geom.out_channels {
            return Err(mismatch("conv2d bias", k, b));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let positions = oh * ow;
        let mut out = Array2::zeros((x.nrows(), geom.out_len()));
        let mut all_cols = Vec::with_capacity(x.nrows());
        for (n, row) in x.rows().into_iter().enumerate() {
            let cols = im2col(row.as_slice().expect("standard layout"), &geom);
            let res = cols.dot(&k.t());
            let mut orow = out.row_mut(n);
            for o in 0..geom.out_channels {
                let bo = b[[0, o]];
                for p in 0..positions {
                    orow[o * positions + p] = res[[p, o]] + bo;
                }
            }
            all_cols.push(cols);
        }
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: all_cols,
            },
        ))
    }

    /// Average pool of each channel over a `grid × grid` partition of the map.
    /// Cell bounds use floor division, so `h` and `w` need only be `≥ grid`.
    pub fn avg_pool_grid(
        &mut self,
        input: Var,
        channels: usize,
        h: usize,
        w: usize,
        grid: usize,
    ) -> Result<Var, NnError> {
        let x = self.value(input);
        if x.ncols() != channels * h * w || grid == 0 || h < grid || w < grid {
            return Err(NnError::ShapeMismatch {
                op: "avg_pool_grid",
                left: x.shape().to_vec(),
                right: vec![channels, h, w, grid],
            });
        }
        let mut out = Array2::zeros((x.nrows(), channels * grid * grid));
        for (n, row) in x.rows().into_iter().enumerate() {
            for c in 0..channels {
                for gy in 0..grid {
                    let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                    for gx in 0..grid {
                        let (x0, x1) = (gx * w / grid, (gx + 1) * w / grid);
                        let mut sum = 0.0;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                sum += row[c * h * w + y * w + xx];
                            }
                        }
                        let count = ((y1 - y0) * (x1 - x0)) as f64;
                        out[[n, c * grid * grid + gy * grid + gx]] = sum / count;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::AvgPoolGrid {
                input,
                channels,
                h,
                w,
                grid,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or(NnError::Empty("concat_cols"))?;
        let rows = self.value(*first).nrows();
        let mut views = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.nrows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            views.push(v.view());
        }
        let out =
            ndarray::concatenate(Axis(1), &views).map_err(|e| NnError::Invalid(e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or(NnError::Empty("concat_rows"))?;
        let cols = self.value(*first).ncols();
        let mut views = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.ncols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), v));
            }
            views.push(v.view());
        }
        let out =
            ndarray::concatenate(Axis(0), &views).map_err(|e| NnError::Invalid(e.to_string()))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let av = self.value(a);
        if start > end || end > av.nrows() {
            return Err(NnError::IndexOutOfRange {
                index: end,
                len: av.nrows(),
            });
        }
        let out = av.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NnError> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.nrows()) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                len: av.nrows(),
            });
        }
        let out = av.select(Axis(0), indices);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    /// Row-wise softmax restricted to entries where `mask` is true.
    /// Masked entries are exactly zero; a row with no allowed entry is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Result<Var, NnError> {
        let av = self.value(a);
        if av.shape() != mask.shape() {
            return Err(NnError::ShapeMismatch {
                op: "masked_softmax_rows",
                left: av.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let mut out = Array2::zeros(av.dim());
        for ((row, mrow), mut orow) in av.rows().into_iter().zip(mask.rows()).zip(out.rows_mut()) {
            let max = row
                .iter()
                .zip(mrow.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ((o, &v), &m) in orow.iter_mut().zip(row.iter()).zip(mrow.iter()) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.mapv_inplace(|o| o / sum);
        }
        Ok(self.push(out, Op::MaskedSoftmaxRows(a)))
    }

    /// Per-row dot products of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("row_dot", av, bv));
        }
        let dots: Vec<f64> = av
            .rows()
            .into_iter()
            .zip(bv.rows())
            .map(|(x, y)| x.dot(&y))
            .collect();
        let out = Array2::from_shape_vec((dots.len(), 1), dots).expect("column");
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    /// Mean negative-sampling loss over a column of pair scores.
    pub fn nce_loss(&mut self, scores: Var, positive: &[bool]) -> Result<Var, NnError> {
        let sv = self.value(scores);
        if sv.ncols() != 1 || sv.nrows() != positive.len() || positive.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: "nce_loss",
                left: sv.shape().to_vec(),
                right: vec![positive.len()],
            });
        }
        let total: f64 = sv
            .column(0)
            .iter()
            .zip(positive)
            .map(|(&s, &pos)| if pos { softplus(-s) } else { softplus(s) })
            .sum();
        let loss = total / positive.len() as f64;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::NceLoss(scores, positive.to_vec()),
        ))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let lv = self.value(logits);
        if lv.nrows() != labels.len() || labels.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.ncols()) {
            return Err(NnError::IndexOutOfRange {
                index: bad,
                len: lv.ncols(),
            });
        }
        let probs = softmax_rows(lv);
        let mut total = 0.0;
        for (row, &label) in lv.rows().into_iter().zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Back-propagates from a 1×1 node and collects parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                left: lv.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: BTreeMap<String, (Array2<f64>, Vec<usize>)> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name, shape) => match out.get_mut(name) {
                    Some((acc, _)) => *acc += &g,
                    None => {
                        out.insert(name.clone(), (g, shape.clone()));
                    }
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    add_grad(&mut grads[a.0], ga);
                    add_grad(&mut grads[b.0], gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    add_grad(&mut grads[a.0], ga);
                    add_grad(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads[a.0], g.clone());
                    add_grad(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads[row.0], gr);
                    add_grad(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    add_grad(&mut grads[a.0], ga);
                    add_grad(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => add_grad(&mut grads[a.0], g * *f),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    add_grad(&mut grads[a.0], ga);
                }
                Op::MaskMul(a, mask) => add_grad(&mut grads[a.0], g * mask),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let k = self.value(*kernel);
                    let positions = geom.out_h() * geom.out_w();
                    let mut gk = Array2::zeros(k.dim());
                    let mut gb = Array2::zeros((1, geom.out_channels));
                    let mut gx = Array2::zeros((g.nrows(), geom.in_len()));
                    for (n, grow) in g.rows().into_iter().enumerate() {
                        // [O, P] view of this sample's output gradient
                        let gout = grow
                            .into_shape_with_order((geom.out_channels, positions))
                            .expect("conv output layout");
                        gk += &gout.dot(&cols[n]);
                        for o in 0..geom.out_channels {
                            gb[[0, o]] += gout.row(o).sum();
                        }
                        let gcols = gout.t().dot(k);
                        col2im(
                            &gcols,
                            geom,
                            gx.row_mut(n).as_slice_mut().expect("standard layout"),
                        );
                    }
                    add_grad(&mut grads[kernel.0], gk);
                    add_grad(&mut grads[bias.0], gb);
                    add_grad(&mut grads[input.0], gx);
                }
                Op::AvgPoolGrid {
                    input,
                    channels,
                    h,
                    w,
                    grid,
                } => {
                    let (channels, h, w, grid) = (*channels, *h, *w, *grid);
                    let mut gx = Array2::zeros((g.nrows(), channels * h * w));
                    for (n, grow) in g.rows().into_iter().enumerate() {
                        for c in 0..channels {
                            for gy in 0..grid {
                                let (y0, y1) = (gy * h / grid, (gy + 1) * h / grid);
                                for gxi in 0..grid {
                                    let (x0, x1) = (gxi * w / grid, (gxi + 1) * w / grid);
                                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                                    let share = grow[c * grid * grid + gy * grid + gxi] / count;
                                    for y in y0..y1 {
                                        for x in x0..x1 {
                                            gx[[n, c * h * w + y * w + x]] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_grad(&mut grads[input.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + width]).to_owned();
                        add_grad(&mut grads[p.0], gp);
                        offset += width;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let height = self.value(*p).nrows();
                        let gp = g.slice(s![offset..offset + height, ..]).to_owned();
                        add_grad(&mut grads[p.0], gp);
                        offset += height;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    add_grad(&mut grads[a.0], ga);
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    add_grad(&mut grads[a.0], ga);
                }
                Op::MaskedSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((yr, gr), mut out) in y.rows().into_iter().zip(g.rows()).zip(ga.rows_mut())
                    {
                        let inner = yr.dot(&gr);
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *o = yv * (gv - inner);
                        }
                    }
                    add_grad(&mut grads[a.0], ga);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gcol = g.column(0).insert_axis(Axis(1));
                    add_grad(&mut grads[a.0], bv * &gcol);
                    add_grad(&mut grads[b.0], av * &gcol);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    add_grad(&mut grads[a.0], ga);
                }
                Op::NceLoss(scores, positive) => {
                    let sv = self.value(*scores);
                    let scale = g[[0, 0]] / positive.len() as f64;
                    let mut gs = Array2::zeros(sv.dim());
                    for ((o, &s), &pos) in
                        gs.column_mut(0).iter_mut().zip(sv.column(0)).zip(positive)
                    {
                        *o = scale * if pos { sigmoid(s) - 1.0 } else { sigmoid(s) };
                    }
                    add_grad(&mut grads[scores.0], gs);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (mut row, &label) in gl.rows_mut().into_iter().zip(labels) {
                        row[label] -= 1.0;
                    }
                    add_grad(&mut grads[logits.0], gl * scale);
                }
            }
        }

        let mut result = Gradients::default();
        for (name, (g, shape)) in out {
            let data: Vec<f64> = g.into_iter().collect();
            let g = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| NnError::Invalid(e.to_string()))?;
            result.grads.insert(name, g);
        }
        Ok(result)
    }
}

/// Row-wise softmax of a matrix.
pub(crate) fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Array2<f64> {
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    let mut cols = Array2::zeros((oh * ow, geom.patch_len()));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut row = cols.row_mut(oy * ow + ox);
            for c in 0..geom.in_channels {
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        row[c * k * k + ky * k + kx] =
                            x[c * geom.in_h * geom.in_w + iy as usize * geom.in_w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &Array2<f64>, geom: &ConvGeom, gx: &mut [f64]) {
    let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = gcols.row(oy * ow + ox);
            for c in 0..geom.in_channels {
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.in_w as isize {
                            continue;
                        }
                        gx[c * geom.in_h * geom.in_w + iy as usize * geom.in_w + ix as usize] +=
                            row[c * k * k + ky * k + kx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(x: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                acc += kernel[((o * g.in_channels + c) * k + ky) * k + kx]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_valid_region() {
        let geom = ConvGeom {
            in_channels: 1,
            in_h: 5,
            in_w: 6,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            pad: 0,
        };
        let x: Vec<f64> = (0..30).map(|v| (v as f64 * 0.37).sin()).collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(Array2::from_shape_vec((1, 30), x.clone()).unwrap());
        let mut k = Array2::zeros((1, 9));
        k[[0, 4]] = 1.0;
        let kv = tape.leaf(k);
        let bv = tape.leaf(Array2::zeros((1, 1)));
        let y = tape.conv2d(xv, kv, bv, geom).unwrap();
        let out = tape.value(y);
        for oy in 0..3 {
            for ox in 0..4 {
                assert_eq!(out[[0, oy * 4 + ox]], x[(oy + 1) * 6 + ox + 1]);
            }
        }
    }

    #[test]
    fn strided_padded_conv_matches_direct_oracle() {
        let geom = ConvGeom {
            in_channels: 2,
            in_h: 7,
            in_w: 5,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..geom.in_len())
            .map(|v| ((v * 7 % 11) as f64) - 5.0)
            .collect();
        let kern: Vec<f64> = (0..3 * 18)
            .map(|v| ((v * 5 % 13) as f64) * 0.1 - 0.6)
            .collect();
        let bias = vec![0.1, -0.2, 0.3];
        let mut tape = Tape::new();
        let xv = tape.leaf(Array2::from_shape_vec((1, geom.in_len()), x.clone()).unwrap());
        let kv = tape.leaf(Array2::from_shape_vec((3, 18), kern.clone()).unwrap());
        let bv = tape.leaf(Array2::from_shape_vec((1, 3), bias.clone()).unwrap());
        let y = tape.conv2d(xv, kv, bv, geom).unwrap();
        let expect = direct_conv(&x, &kern, &bias, &geom);
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_without_rng_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0, 3.5]]);
        let y = tape.dropout::<ChaCha8Rng>(x, 0.5, None).unwrap();
        assert_eq!(x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = tape.dropout(x, 0.0, Some(&mut rng)).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::ones((1, 1000)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.dropout(x, 0.25, Some(&mut rng)).unwrap();
        let vals = tape.value(y);
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }

    #[test]
    fn masked_softmax_handles_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]);
        let mask = array![[false, false, false], [true, true, false]];
        let y = tape.masked_softmax_rows(x, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0).sum(), 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(v[[1, 2]], 0.0);
    }

    #[test]
    fn backward_of_product_sum() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[2], vec![2.0, 5.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let a = tape.slice_rows(w, 0, 1).unwrap();
        let prod = tape.mul(a, a).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get("w").unwrap();
        assert_eq!(g.iter().copied().collect::<Vec<_>>(), vec![4.0, 10.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::zeros((2, 2)));
        assert!(tape.backward(x).is_err());
    }
}
