//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive applied to dense `f64` matrices and
//! caches forward values eagerly, so graph construction can branch on
//! computed values. [`Tape::backward`] walks the records in reverse and
//! accumulates exact gradients for every node.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::error::FairsadError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Directed arc list shared between scatter ops: `(dst, src)` pairs.
#[derive(Debug, Clone)]
pub struct ArcList {
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
}

impl ArcList {
    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize, end: usize },
    GatherRows { src: usize, rows: Arc<Vec<usize>> },
    ConcatRows(Vec<usize>),
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    MulRowBroadcast { mat: usize, row: usize },
    BroadcastScalar { src: usize },
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    L2NormalizeRows(usize),
    WeightedScatterSum { values: usize, weights: usize, arcs: Arc<ArcList> },
    Mean(usize),
    Abs(usize),
    Sqrt(usize),
    BceWithLogits { logits: usize, targets: Arc<Vec<f64>>, rows: Arc<Vec<usize>> },
    SoftmaxCrossEntropy { logits: usize, labels: Arc<Vec<usize>>, scale: f64 },
    PairwiseAbsDist(usize),
    DoubleCenter(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MulRowBroadcast { .. } => "mul_row_broadcast",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::WeightedScatterSum { .. } => "weighted_scatter_sum",
            Op::Mean(..) => "mean",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::PairwiseAbsDist(..) => "pairwise_abs_dist",
            Op::DoubleCenter(..) => "double_center",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a forward computation and plays it back for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`; zeros if the node
    /// does not influence the root.
    pub fn get(&self, v: Var, like: &Array2<f64>) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(like.raw_dim()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &str, node: usize, detail: String) -> FairsadError {
    FairsadError::Shape { op: op.to_string(), node, detail }
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

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or probed input).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input (data, noise draws).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, FairsadError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ncols() != bv.nrows() {
            return Err(shape_err(
                "matmul",
                self.nodes.len(),
                format!("{}x{} . {}x{}", av.nrows(), av.ncols(), bv.nrows(), bv.ncols()),
            ));
        }
        let value = av.dot(bv);
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    /// Adds a 1xd bias row to every row of an nxd matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, FairsadError> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(shape_err(
                "add_bias",
                self.nodes.len(),
                format!("matrix {}x{}, bias {}x{}", xv.nrows(), xv.ncols(), bv.nrows(), bv.ncols()),
            ));
        }
        let value = xv + &bv.row(0);
        Ok(self.push(value, Op::AddBias(x.0, bias.0)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, FairsadError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", self.nodes.len(), "empty part list".into()));
        }
        let rows = self.nodes[parts[0].0].value.nrows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.nrows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.nodes.len(),
                    format!("row mismatch: {} vs {}", pv.nrows(), rows),
                ));
            }
            value.slice_mut(s![.., offset..offset + pv.ncols()]).assign(pv);
            offset += pv.ncols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var, FairsadError> {
        let sv = &self.nodes[src.0].value;
        if end > sv.ncols() || start >= end {
            return Err(shape_err(
                "slice_cols",
                self.nodes.len(),
                format!("range {start}..{end} of {} cols", sv.ncols()),
            ));
        }
        let value = sv.slice(s![.., start..end]).to_owned();
        Ok(self.push(value, Op::SliceCols { src: src.0, start, end }))
    }

    pub fn gather_rows(&mut self, src: Var, rows: Arc<Vec<usize>>) -> Result<Var, FairsadError> {
        let sv = &self.nodes[src.0].value;
        let n = sv.nrows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", self.nodes.len(), format!("row {bad} out of {n}")));
        }
        let mut value = Array2::zeros((rows.len(), sv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&sv.row(r));
        }
        Ok(self.push(value, Op::GatherRows { src: src.0, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, FairsadError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", self.nodes.len(), "empty part list".into()));
        }
        let cols = self.nodes[parts[0].0].value.ncols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.nrows()).sum();
        let mut value = Array2::zeros((rows, cols));
        let mut offset = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.ncols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.nodes.len(),
                    format!("col mismatch: {} vs {}", pv.ncols(), cols),
                ));
            }
            value.slice_mut(s![offset..offset + pv.nrows(), ..]).assign(pv);
            offset += pv.nrows();
        }
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    fn binary_same_shape(&mut self, op: &str, a: Var, b: Var) -> Result<(), FairsadError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.raw_dim() != bv.raw_dim() {
            return Err(shape_err(
                op,
                self.nodes.len(),
                format!("{}x{} vs {}x{}", av.nrows(), av.ncols(), bv.nrows(), bv.ncols()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, FairsadError> {
        self.binary_same_shape("add", a, b)?;
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, FairsadError> {
        self.binary_same_shape("mul", a, b)?;
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, FairsadError> {
        self.binary_same_shape("div", a, b)?;
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        Ok(self.push(value, Op::Div(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = &self.nodes[x.0].value * c;
        self.push(value, Op::Scale(x.0, c))
    }

    /// Columnwise scaling: multiplies each row of `mat` (nxd) by `row` (1xd).
    pub fn mul_row_broadcast(&mut self, mat: Var, row: Var) -> Result<Var, FairsadError> {
        let (mv, rv) = (&self.nodes[mat.0].value, &self.nodes[row.0].value);
        if rv.nrows() != 1 || rv.ncols() != mv.ncols() {
            return Err(shape_err(
                "mul_row_broadcast",
                self.nodes.len(),
                format!("matrix {}x{}, row {}x{}", mv.nrows(), mv.ncols(), rv.nrows(), rv.ncols()),
            ));
        }
        let value = mv * &rv.row(0);
        Ok(self.push(value, Op::MulRowBroadcast { mat: mat.0, row: row.0 }))
    }

    /// Fills a rows x cols matrix with the value of a 1x1 node.
    pub fn broadcast_scalar(&mut self, src: Var, rows: usize, cols: usize) -> Result<Var, FairsadError> {
        let sv = &self.nodes[src.0].value;
        if sv.len() != 1 {
            return Err(shape_err(
                "broadcast_scalar",
                self.nodes.len(),
                format!("source is {}x{}", sv.nrows(), sv.ncols()),
            ));
        }
        let value = Array2::from_elem((rows, cols), sv[[0, 0]]);
        Ok(self.push(value, Op::BroadcastScalar { src: src.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(sigmoid_stable);
        self.push(value, Op::Sigmoid(x.0))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(x.0))
    }

    /// Row-wise L2 normalization; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        self.push(value, Op::L2NormalizeRows(x.0))
    }

    /// Edge-weighted scatter-sum: `out[dst] += w_arc * values[src]` per arc.
    /// `weights` must be a length-m column vector aligned with `arcs`.
    pub fn weighted_scatter_sum(
        &mut self,
        values: Var,
        weights: Var,
        arcs: Arc<ArcList>,
        num_rows: usize,
    ) -> Result<Var, FairsadError> {
        let (vv, wv) = (&self.nodes[values.0].value, &self.nodes[weights.0].value);
        if wv.ncols() != 1 || wv.nrows() != arcs.len() {
            return Err(shape_err(
                "weighted_scatter_sum",
                self.nodes.len(),
                format!("weights {}x{}, arcs {}", wv.nrows(), wv.ncols(), arcs.len()),
            ));
        }
        let mut value = Array2::zeros((num_rows, vv.ncols()));
        for a in 0..arcs.len() {
            let w = wv[[a, 0]];
            let src = vv.row(arcs.src[a]);
            let mut dst = value.row_mut(arcs.dst[a]);
            dst.zip_mut_with(&src, |d, &s| *d += w * s);
        }
        Ok(self.push(value, Op::WeightedScatterSum { values: values.0, weights: weights.0, arcs }))
    }

    /// Mean over all entries, as a 1x1 node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let value = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.mapv(f64::sqrt);
        self.push(value, Op::Sqrt(x.0))
    }

    /// Mean binary cross-entropy with logits over the rows in `rows`.
    /// `targets` is indexed by position in `rows`.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        targets: Arc<Vec<f64>>,
        rows: Arc<Vec<usize>>,
    ) -> Result<Var, FairsadError> {
        let lv = &self.nodes[logits.0].value;
        if lv.ncols() != 1 || rows.len() != targets.len() || rows.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                self.nodes.len(),
                format!("logits {}x{}, rows {}, targets {}", lv.nrows(), lv.ncols(), rows.len(), targets.len()),
            ));
        }
        let mut total = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let x = lv[[r, 0]];
            let y = targets[i];
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let value = Array2::from_elem((1, 1), total / rows.len() as f64);
        Ok(self.push(value, Op::BceWithLogits { logits: logits.0, targets, rows }))
    }

    /// `scale * sum_r -log softmax(logits_r)[label_r]`, as a 1x1 node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: Arc<Vec<usize>>,
        scale: f64,
    ) -> Result<Var, FairsadError> {
        let lv = &self.nodes[logits.0].value;
        if labels.len() != lv.nrows() {
            return Err(shape_err(
                "softmax_cross_entropy",
                self.nodes.len(),
                format!("logits rows {}, labels {}", lv.nrows(), labels.len()),
            ));
        }
        let mut total = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[lab];
        }
        let value = Array2::from_elem((1, 1), scale * total);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits: logits.0, labels, scale }))
    }

    /// Pairwise absolute-distance matrix of an nx1 column: `D[i][j] = |x_i - x_j|`.
    pub fn pairwise_abs_dist(&mut self, x: Var) -> Result<Var, FairsadError> {
        let xv = &self.nodes[x.0].value;
        if xv.ncols() != 1 {
            return Err(shape_err(
                "pairwise_abs_dist",
                self.nodes.len(),
                format!("expected column vector, got {}x{}", xv.nrows(), xv.ncols()),
            ));
        }
        let n = xv.nrows();
        let mut value = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                value[[i, j]] = (xv[[i, 0]] - xv[[j, 0]]).abs();
            }
        }
        Ok(self.push(value, Op::PairwiseAbsDist(x.0)))
    }

    /// `A = a - rowmean - colmean + grandmean` for a square matrix.
    pub fn double_center(&mut self, x: Var) -> Result<Var, FairsadError> {
        let xv = &self.nodes[x.0].value;
        if xv.nrows() != xv.ncols() {
            return Err(shape_err(
                "double_center",
                self.nodes.len(),
                format!("not square: {}x{}", xv.nrows(), xv.ncols()),
            ));
        }
        let value = double_center_array(xv);
        Ok(self.push(value, Op::DoubleCenter(x.0)))
    }

    /// Convenience: `a - b` via scale/add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, FairsadError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Reverse pass from a scalar node; returns gradients for every node.
    pub fn backward(&self, root: Var) -> Result<Gradients, FairsadError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(FairsadError::NonScalarBackward {
                node: root.0,
                rows: self.nodes[root.0].value.nrows(),
                cols: self.nodes[root.0].value.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], target: usize, delta: Array2<f64>| {
            match &mut grads[target] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.dot(&bv.t()));
                add_to(grads, *b, av.t().dot(g));
            }
            Op::AddBias(x, bias) => {
                add_to(grads, *x, g.clone());
                let col_sums = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *bias, col_sums);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.ncols();
                    add_to(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::SliceCols { src, start, end } => {
                let sv = &self.nodes[*src].value;
                let mut delta = Array2::zeros(sv.raw_dim());
                delta.slice_mut(s![.., *start..*end]).assign(g);
                add_to(grads, *src, delta);
            }
            Op::GatherRows { src, rows } => {
                let sv = &self.nodes[*src].value;
                let mut delta = Array2::zeros(sv.raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dr = delta.row_mut(r);
                    dr.zip_mut_with(&g.row(i), |d, &v| *d += v);
                }
                add_to(grads, *src, delta);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.nodes[p].value.nrows();
                    add_to(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[*b].value);
                add_to(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g / bv);
                let out = &self.nodes[id].value;
                add_to(grads, *b, -(g * out / bv));
            }
            Op::Scale(x, c) => add_to(grads, *x, g * *c),
            Op::MulRowBroadcast { mat, row } => {
                let rv = &self.nodes[*row].value;
                add_to(grads, *mat, g * &rv.row(0));
                let mv = &self.nodes[*mat].value;
                let dr = (g * mv).sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, dr);
            }
            Op::BroadcastScalar { src } => {
                add_to(grads, *src, Array2::from_elem((1, 1), g.sum()));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let mut delta = g.clone();
                delta.zip_mut_with(xv, |d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                add_to(grads, *x, delta);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[id].value;
                add_to(grads, *x, g * out * &out.mapv(|v| 1.0 - v));
            }
            Op::SoftmaxRows(x) => {
                let out = &self.nodes[id].value;
                let mut delta = Array2::zeros(out.raw_dim());
                for r in 0..out.nrows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    let mut dr = delta.row_mut(r);
                    for j in 0..y.len() {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                add_to(grads, *x, delta);
            }
            Op::L2NormalizeRows(x) => {
                let xv = &self.nodes[*x].value;
                let out = &self.nodes[id].value;
                let mut delta = Array2::zeros(xv.raw_dim());
                for r in 0..xv.nrows() {
                    let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    let mut dr = delta.row_mut(r);
                    for j in 0..y.len() {
                        dr[j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                add_to(grads, *x, delta);
            }
            Op::WeightedScatterSum { values, weights, arcs } => {
                let vv = &self.nodes[*values].value;
                let wv = &self.nodes[*weights].value;
                let mut dv = Array2::zeros(vv.raw_dim());
                let mut dw = Array2::zeros(wv.raw_dim());
                for a in 0..arcs.len() {
                    let (dst, src) = (arcs.dst[a], arcs.src[a]);
                    let w = wv[[a, 0]];
                    let gd = g.row(dst);
                    let mut dvr = dv.row_mut(src);
                    dvr.zip_mut_with(&gd, |d, &v| *d += w * v);
                    dw[[a, 0]] = gd.iter().zip(vv.row(src).iter()).map(|(a, b)| a * b).sum();
                }
                add_to(grads, *values, dv);
                add_to(grads, *weights, dw);
            }
            Op::Mean(x) => {
                let xv = &self.nodes[*x].value;
                let c = g[[0, 0]] / xv.len() as f64;
                add_to(grads, *x, Array2::from_elem(xv.raw_dim(), c));
            }
            Op::Abs(x) => {
                let xv = &self.nodes[*x].value;
                let mut delta = g.clone();
                delta.zip_mut_with(xv, |d, &v| *d *= sign_sub(v));
                add_to(grads, *x, delta);
            }
            Op::Sqrt(x) => {
                let xv = &self.nodes[*x].value;
                let out = &self.nodes[id].value;
                let mut delta = g.clone();
                delta.zip_mut_with(out, |d, &y| {
                    if y == 0.0 {
                        *d = 0.0;
                    } else {
                        *d /= 2.0 * y;
                    }
                });
                // sqrt of a negative is NaN; keep gradient zero there too
                delta.zip_mut_with(xv, |d, &v| {
                    if v < 0.0 {
                        *d = 0.0;
                    }
                });
                add_to(grads, *x, delta);
            }
            Op::BceWithLogits { logits, targets, rows } => {
                let lv = &self.nodes[*logits].value;
                let mut delta = Array2::zeros(lv.raw_dim());
                let scale = g[[0, 0]] / rows.len() as f64;
                for (i, &r) in rows.iter().enumerate() {
                    delta[[r, 0]] += scale * (sigmoid_stable(lv[[r, 0]]) - targets[i]);
                }
                add_to(grads, *logits, delta);
            }
            Op::SoftmaxCrossEntropy { logits, labels, scale } => {
                let lv = &self.nodes[*logits].value;
                let mut delta = Array2::zeros(lv.raw_dim());
                let c = g[[0, 0]] * scale;
                for (r, &lab) in labels.iter().enumerate() {
                    let row = lv.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let mut dr = delta.row_mut(r);
                    for j in 0..row.len() {
                        let p = exps[j] / sum;
                        dr[j] = c * (p - if j == lab { 1.0 } else { 0.0 });
                    }
                }
                add_to(grads, *logits, delta);
            }
            Op::PairwiseAbsDist(x) => {
                let xv = &self.nodes[*x].value;
                let n = xv.nrows();
                let mut delta = Array2::zeros((n, 1));
                for i in 0..n {
                    for j in 0..n {
                        let sgn = sign_sub(xv[[i, 0]] - xv[[j, 0]]);
                        delta[[i, 0]] += g[[i, j]] * sgn;
                        delta[[j, 0]] -= g[[i, j]] * sgn;
                    }
                }
                add_to(grads, *x, delta);
            }
            Op::DoubleCenter(x) => {
                // the centering projection is symmetric, so the VJP is the
                // same double-centering applied to the incoming gradient
                add_to(grads, *x, double_center_array(g));
            }
        }
    }

    /// Names the op producing a node (diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign_sub(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn double_center_array(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let row_means = a.mean_axis(Axis(1)).unwrap();
    let col_means = a.mean_axis(Axis(0)).unwrap();
    let grand = a.sum() / (n * n) as f64;
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = a[[i, j]] - row_means[i] - col_means[j] + grand;
        }
    }
    out
}

/// Max relative error between analytic gradients and central finite
/// differences of `f` at `point`, probing every coordinate with `step`.
///
/// `f` must build a scalar from the single leaf it is given.
pub fn finite_difference_check<F>(f: F, point: &Array2<f64>, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x);
    let grads = tape.backward(out).expect("scalar output required");
    let analytic = grads.get(x, point);

    let mut max_err = 0.0_f64;
    for idx in 0..point.len() {
        let (i, j) = (idx / point.ncols(), idx % point.ncols());
        let eval = |v: f64| -> f64 {
            let mut p = point.clone();
            p[[i, j]] = v;
            let mut t = Tape::new();
            let xv = t.leaf(p);
            let o = f(&mut t, xv);
            t.scalar(o)
        };
        let fd = (eval(point[[i, j]] + step) - eval(point[[i, j]] - step)) / (2.0 * step);
        let err = (analytic[[i, j]] - fd).abs() / (fd.abs() + 1e-8);
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let i = t.constant(Array2::eye(2));
        let out = t.matmul(a, i).unwrap();
        assert_eq!(t.value(out), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0, 4.0]]);
        let out = t.l2_normalize_rows(x);
        assert_abs_diff_eq!(t.value(out)[[0, 0]], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(out)[[0, 1]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0, 0.0, 0.0, 0.0]]);
        let out = t.softmax_rows(x);
        for &v in t.value(out).iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.leaf(random_matrix(&mut rng, 7, 5));
        let out = t.softmax_rows(x);
        for row in t.value(out).rows() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0, 4.0]]);
        let out = t.mean(x);
        let g = t.backward(out).unwrap();
        for &v in g.try_get(x).unwrap().iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn abs_gradient_sign() {
        let mut t = Tape::new();
        let x = t.leaf(array![[-2.0]]);
        let a = t.abs(x);
        let out = t.mean(a);
        let g = t.backward(out).unwrap();
        assert_abs_diff_eq!(g.try_get(x).unwrap()[[0, 0]], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[1.0, 2.0]]);
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn linear_function_fd_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_matrix(&mut rng, 3, 2);
        let point = random_matrix(&mut rng, 4, 3);
        let err = finite_difference_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(x, wv).unwrap();
                t.mean(y)
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-9, "linear fd error {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let point = random_matrix(&mut rng, 5, 3) + 0.1;
            let w = random_matrix(&mut rng, 3, 3);
            let bias = random_matrix(&mut rng, 1, 3);
            let other = random_matrix(&mut rng, 5, 3) + 2.0;
            let arcs = Arc::new(ArcList { dst: vec![0, 1, 2, 0], src: vec![1, 2, 3, 4] });
            let cases: Vec<Box<dyn Fn(&mut Tape, Var) -> Var>> = vec![
                Box::new({
                    let w = w.clone();
                    move |t, x| {
                        let wv = t.constant(w.clone());
                        let y = t.matmul(x, wv).unwrap();
                        let y = t.sigmoid(y);
                        t.mean(y)
                    }
                }),
                Box::new({
                    let bias = bias.clone();
                    move |t, x| {
                        let b = t.constant(bias.clone());
                        let y = t.add_bias(x, b).unwrap();
                        let y = t.relu(y);
                        t.mean(y)
                    }
                }),
                Box::new(|t, x| {
                    let y = t.softmax_rows(x);
                    let sq = t.mul(y, y).unwrap();
                    t.mean(sq)
                }),
                Box::new(|t, x| {
                    let y = t.l2_normalize_rows(x);
                    let c = t.slice_cols(y, 0, 2).unwrap();
                    t.mean(c)
                }),
                Box::new({
                    let other = other.clone();
                    move |t, x| {
                        let o = t.constant(other.clone());
                        let y = t.div(x, o).unwrap();
                        let z = t.abs(y);
                        t.mean(z)
                    }
                }),
                Box::new({
                    let arcs = arcs.clone();
                    move |t, x| {
                        let w = t.constant(Array2::from_elem((4, 1), 0.5));
                        let y = t.weighted_scatter_sum(x, w, arcs.clone(), 5).unwrap();
                        let y = t.sigmoid(y);
                        t.mean(y)
                    }
                }),
                Box::new(|t, x| {
                    let col = t.slice_cols(x, 0, 1).unwrap();
                    let d = t.pairwise_abs_dist(col).unwrap();
                    let c = t.double_center(d).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.mean(sq)
                }),
                Box::new(|t, x| {
                    let sq = t.mul(x, x).unwrap();
                    let sqr = t.sqrt(sq);
                    t.mean(sqr)
                }),
                Box::new(|t, x| {
                    let col = t.slice_cols(x, 0, 1).unwrap();
                    t.bce_with_logits(col, Arc::new(vec![1.0, 0.0, 1.0]), Arc::new(vec![0, 2, 4]))
                        .unwrap()
                }),
                Box::new(|t, x| {
                    t.softmax_cross_entropy(x, Arc::new(vec![0, 1, 2, 0, 1]), 0.37).unwrap()
                }),
                Box::new(|t, x| {
                    let m = t.mean(x);
                    let b = t.broadcast_scalar(m, 5, 3).unwrap();
                    let c = t.sub(x, b).unwrap();
                    let sq = t.mul(c, c).unwrap();
                    t.mean(sq)
                }),
                Box::new(|t, x| {
                    let row = t.slice_cols(x, 0, 3).unwrap();
                    let row1 = t.gather_rows(row, Arc::new(vec![0])).unwrap();
                    let y = t.mul_row_broadcast(x, row1).unwrap();
                    t.mean(y)
                }),
                Box::new(|t, x| {
                    let a = t.gather_rows(x, Arc::new(vec![0, 2])).unwrap();
                    let b = t.gather_rows(x, Arc::new(vec![1, 3])).unwrap();
                    let c = t.concat_rows(&[a, b]).unwrap();
                    let d = t.concat_cols(&[c, c]).unwrap();
                    let sq = t.mul(d, d).unwrap();
                    t.mean(sq)
                }),
            ];
            for (ci, case) in cases.iter().enumerate() {
                let err = finite_difference_check(case, &point, 1e-5);
                assert!(err < 1e-4, "trial {trial} case {ci}: fd error {err}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let point = random_matrix(&mut rng, 6, 4);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(point.clone());
            let y = t.softmax_rows(x);
            let z = t.l2_normalize_rows(y);
            let out = t.mean(z);
            let g = t.backward(out).unwrap();
            g.try_get(x).unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }
}
