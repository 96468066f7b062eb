//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation records
//! its inputs and output value; [`Graph::backward`] walks the tape in reverse
//! and returns a [`Gradients`] table. Nodes that do not depend on any
//! parameter are never visited on the way back.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row grouping used by graph propagation.
///
/// Rows of a batch belong to groups (all samples sharing a window start);
/// propagation mixes rows of the same group according to the adjacency
/// entry between their nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupLayout {
    nodes: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl GroupLayout {
    /// `nodes[r]` is the node index of row `r`, `group_keys[r]` an arbitrary
    /// key; rows with equal keys form one group.
    pub fn new(nodes: &[usize], group_keys: &[usize]) -> Self {
        assert_eq!(nodes.len(), group_keys.len());
        let mut keys: Vec<usize> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (row, &k) in group_keys.iter().enumerate() {
            match keys.iter().position(|&x| x == k) {
                Some(g) => groups[g].push(row),
                None => {
                    keys.push(k);
                    groups.push(vec![row]);
                }
            }
        }
        Self {
            nodes: nodes.to_vec(),
            groups,
        }
    }

    /// Every row in its own group.
    pub fn isolated(nodes: &[usize]) -> Self {
        Self {
            nodes: nodes.to_vec(),
            groups: (0..nodes.len()).map(|r| vec![r]).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn max_node(&self) -> Option<usize> {
        self.nodes.iter().copied().max()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub in_len: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn out_len(&self) -> usize {
        self.in_len - self.dilation * (self.kernel - 1)
    }
}

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    SubScalar(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    GatherMean(Var, Rc<Vec<Vec<usize>>>),
    GraphMix(Var, Var, Rc<GroupLayout>),
    Conv1d(Var, Var, Var, ConvShape),
    RowMean(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    WeightedBce(Var, Rc<Vec<f64>>, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::Shape {
        op,
        expected,
        found,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// The parameter `id` of `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), t))
    }

    /// `a + 1·bias` where `bias` is a single row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        let bs = self.value(bias).shape();
        if bs != (1, n) {
            return Err(shape_err("add_row", (1, n), bs));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..m {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let t = self.tracked(a) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow(a, bias), t))
    }

    /// Scales row `r` of `a` by `s[r]`, with `s` a column.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, _) = self.value(a).shape();
        let ss = self.value(s).shape();
        if ss != (m, 1) {
            return Err(shape_err("mul_col", (m, 1), ss));
        }
        let mut value = self.value(a).clone();
        for r in 0..m {
            let k = self.nodes[s.0].value[(r, 0)];
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let t = self.tracked(a) || self.tracked(s);
        Ok(self.push(value, Op::MulCol(a, s), t))
    }

    /// `a - s` with `s` a 1×1 node.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ss = self.value(s).shape();
        if ss != (1, 1) {
            return Err(shape_err("sub_scalar", (1, 1), ss));
        }
        let k = self.scalar(s);
        let value = self.value(a).map(|v| v - k);
        let t = self.tracked(a) || self.tracked(s);
        Ok(self.push(value, Op::SubScalar(a, s), t))
    }

    /// `a·scale + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| v * scale + shift);
        let t = self.tracked(a);
        self.push(value, Op::Affine(a, scale), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a diverged model surfaces as a non-finite loss
        let value = self.value(a).map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::fabs);
        let t = self.tracked(a);
        self.push(value, Op::Abs(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        if start + len > n {
            return Err(shape_err("slice_cols", (m, start + len), (m, n)));
        }
        let mut value = Matrix::zeros(m, len);
        for r in 0..m {
            value
                .row_mut(r)
                .copy_from_slice(&self.nodes[a.0].value.row(r)[start..start + len]);
        }
        let t = self.tracked(a);
        Ok(self.push(value, Op::SliceCols(a, start), t))
    }

    /// Column-wise concatenation.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut width = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.0 != m {
                return Err(shape_err("concat_cols", (m, s.1), s));
            }
            width += s.1;
        }
        let mut value = Matrix::zeros(m, width);
        for r in 0..m {
            let mut off = 0;
            for &p in parts {
                let src = self.nodes[p.0].value.row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), t))
    }

    /// Row `i` of the output is the mean of rows `lists[i]` of `src`.
    pub fn gather_mean(&mut self, src: Var, lists: Vec<Vec<usize>>) -> Result<Var> {
        let (rows, d) = self.value(src).shape();
        let mut value = Matrix::zeros(lists.len(), d);
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Parameter("gather_mean: empty index list".into()));
            }
            let w = 1.0 / list.len() as f64;
            for &j in list {
                if j >= rows {
                    return Err(shape_err("gather_mean", (rows, d), (j + 1, d)));
                }
                let srow = self.nodes[src.0].value.row(j);
                for (o, s) in value.row_mut(i).iter_mut().zip(srow) {
                    *o += w * s;
                }
            }
        }
        let t = self.tracked(src);
        Ok(self.push(value, Op::GatherMean(src, Rc::new(lists)), t))
    }

    /// `(I + A)` applied within each group: row `i` becomes
    /// `h_i + Σ_{j in group(i)} A[node_i, node_j]·h_j`.
    pub fn graph_mix(&mut self, h: Var, adj: Var, layout: Rc<GroupLayout>) -> Result<Var> {
        let (m, d) = self.value(h).shape();
        if layout.rows() != m {
            return Err(shape_err("graph_mix", (layout.rows(), d), (m, d)));
        }
        let (an, ac) = self.value(adj).shape();
        if an != ac || layout.max_node().is_some_and(|n| n >= an) {
            return Err(shape_err("graph_mix", (an, an), (an, ac)));
        }
        let hv = &self.nodes[h.0].value;
        let av = &self.nodes[adj.0].value;
        let mut value = hv.clone();
        for group in layout.groups() {
            for &i in group {
                let ni = layout.nodes[i];
                for &j in group {
                    let w = av[(ni, layout.nodes[j])];
                    if w == 0.0 {
                        continue;
                    }
                    let (src, dst) = (hv.row(j), i);
                    let out = &mut value.as_mut_slice()[dst * d..(dst + 1) * d];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        let t = self.tracked(h) || self.tracked(adj);
        Ok(self.push(value, Op::GraphMix(h, adj, layout), t))
    }

    /// Dilated 1-D convolution over a time-major layout.
    ///
    /// `x` is `M × (in_len·in_channels)` with entry `(m, t·C_in + c)`; the
    /// kernel `w` is `(kernel·C_in) × C_out` with row `j·C_in + c`; `b` is
    /// `1 × C_out`. No padding: `out_len = in_len − dilation·(kernel − 1)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, shape: ConvShape) -> Result<Var> {
        let ConvShape {
            in_channels: cin,
            in_len: lin,
            out_channels: cout,
            kernel: k,
            dilation: dil,
        } = shape;
        if dil * (k - 1) >= lin {
            return Err(Error::Parameter("conv1d: receptive field exceeds input".into()));
        }
        let (m, xw) = self.value(x).shape();
        if xw != lin * cin {
            return Err(shape_err("conv1d", (m, lin * cin), (m, xw)));
        }
        let ws = self.value(w).shape();
        if ws != (k * cin, cout) {
            return Err(shape_err("conv1d", (k * cin, cout), ws));
        }
        let bs = self.value(b).shape();
        if bs != (1, cout) {
            return Err(shape_err("conv1d", (1, cout), bs));
        }
        let lout = shape.out_len();
        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.as_slice();
        let bv = self.nodes[b.0].value.as_slice();
        let mut value = Matrix::zeros(m, lout * cout);
        for r in 0..m {
            let xr = xv.row(r);
            let out = value.row_mut(r);
            for t in 0..lout {
                let o = &mut out[t * cout..(t + 1) * cout];
                o.copy_from_slice(bv);
                for j in 0..k {
                    let base = (t + j * dil) * cin;
                    for c in 0..cin {
                        let xval = xr[base + c];
                        if xval == 0.0 {
                            continue;
                        }
                        let wrow = &wv[(j * cin + c) * cout..(j * cin + c + 1) * cout];
                        for (ov, wvv) in o.iter_mut().zip(wrow) {
                            *ov += xval * wvv;
                        }
                    }
                }
            }
        }
        let t = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Conv1d(x, w, b, shape), t))
    }

    /// Mean of each row, as a column.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = av.shape();
        let data = (0..m)
            .map(|r| av.row(r).iter().sum::<f64>() / n as f64)
            .collect();
        let value = Matrix::from_vec(m, 1, data).expect("row_mean shape");
        let t = self.tracked(a);
        self.push(value, Op::RowMean(a), t)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.sum() / av.len() as f64);
        let t = self.tracked(a);
        self.push(value, Op::MeanAll(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let t = self.tracked(a);
        self.push(value, Op::SoftmaxRows(a), t)
    }

    /// `−mean[ω·z·ln p + (1−z)·ln(1−p)]` with `p = clamp(ẑ, ε, 1−ε)`.
    pub fn weighted_bce(&mut self, z_hat: Var, z: &[f64], omega: f64, eps: f64) -> Result<Var> {
        let zs = self.value(z_hat).shape();
        if zs != (z.len(), 1) {
            return Err(shape_err("weighted_bce", (z.len(), 1), zs));
        }
        let value = Matrix::scalar(crate::objectives::weighted_bce_value(
            self.value(z_hat).as_slice(),
            z,
            omega,
            eps,
        ));
        let t = self.tracked(z_hat);
        Ok(self.push(
            value,
            Op::WeightedBce(z_hat, Rc::new(z.to_vec()), omega, eps),
            t,
        ))
    }

    /// Reverse pass from a 1×1 `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (rr, rc) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(rr, rc, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .param_nodes
            .iter()
            .filter_map(|&(id, v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Gradients { nodes: grads, params }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let ga = slot(grads, *a, av.shape());
                    matmul_nt_acc(g, bv, ga);
                }
                if self.tracked(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    matmul_tn_acc(av, g, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.tracked(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.tracked(*b) {
                    let gb = slot(grads, *b, g.shape());
                    for (x, y) in gb.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for ((x, gy), y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *x += gy * y;
                    }
                }
                if self.tracked(*b) {
                    let gb = slot(grads, *b, g.shape());
                    for ((x, gy), y) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *x += gy * y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.tracked(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.tracked(*bias) {
                    let gb = slot(grads, *bias, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (x, y) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::MulCol(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.tracked(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for r in 0..g.rows() {
                        let k = sv[(r, 0)];
                        for (x, y) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += k * y;
                        }
                    }
                }
                if self.tracked(*s) {
                    let gs = slot(grads, *s, sv.shape());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                        gs[(r, 0)] += dot;
                    }
                }
            }
            Op::SubScalar(a, s) => {
                if self.tracked(*a) {
                    slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.tracked(*s) {
                    slot(grads, *s, (1, 1))[(0, 0)] -= g.sum();
                }
            }
            Op::Affine(a, k) => {
                let ga = slot(grads, *a, g.shape());
                for (x, y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *x += k * y;
                }
            }
            Op::Relu(a) => {
                let ga = slot(grads, *a, g.shape());
                for ((x, gy), y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    if *y > 0.0 {
                        *x += gy;
                    }
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g.shape());
                for ((x, gy), y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    *x += gy * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.shape());
                for ((x, gy), y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(out.as_slice()) {
                    *x += gy * y * (1.0 - y);
                }
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, g.shape());
                for ((x, gy), v) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                    // subgradient 0 at the kink
                    if *v > 0.0 {
                        *x += gy;
                    } else if *v < 0.0 {
                        *x -= gy;
                    }
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                slot(grads, *a, gt.shape()).add_assign(&gt);
            }
            Op::SliceCols(a, start) => {
                let shape = self.value(*a).shape();
                let ga = slot(grads, *a, shape);
                for r in 0..g.rows() {
                    for (x, y) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    if self.tracked(p) {
                        let gp = slot(grads, p, shape);
                        for r in 0..g.rows() {
                            for (x, y) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]) {
                                *x += y;
                            }
                        }
                    }
                    off += shape.1;
                }
            }
            Op::GatherMean(src, lists) => {
                let shape = self.value(*src).shape();
                let gs = slot(grads, *src, shape);
                for (i, list) in lists.iter().enumerate() {
                    let w = 1.0 / list.len() as f64;
                    for &j in list {
                        for (x, y) in gs.row_mut(j).iter_mut().zip(g.row(i)) {
                            *x += w * y;
                        }
                    }
                }
            }
            Op::GraphMix(h, adj, layout) => {
                let (hv, av) = (self.value(*h), self.value(*adj));
                let d = hv.cols();
                if self.tracked(*h) {
                    let gh = slot(grads, *h, hv.shape());
                    gh.add_assign(g);
                    for group in layout.groups() {
                        for &i in group {
                            let ni = layout.nodes[i];
                            for &j in group {
                                let w = av[(ni, layout.nodes[j])];
                                if w == 0.0 {
                                    continue;
                                }
                                let dst = &mut gh.as_mut_slice()[j * d..(j + 1) * d];
                                for (x, y) in dst.iter_mut().zip(g.row(i)) {
                                    *x += w * y;
                                }
                            }
                        }
                    }
                }
                if self.tracked(*adj) {
                    let ga = slot(grads, *adj, av.shape());
                    for group in layout.groups() {
                        for &i in group {
                            let ni = layout.nodes[i];
                            for &j in group {
                                let dot: f64 = g.row(i).iter().zip(hv.row(j)).map(|(x, y)| x * y).sum();
                                ga[(ni, layout.nodes[j])] += dot;
                            }
                        }
                    }
                }
            }
            Op::Conv1d(x, w, b, shape) => {
                let ConvShape {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    dilation: dil,
                    ..
                } = *shape;
                let lout = shape.out_len();
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.tracked(*b) {
                    let gb = slot(grads, *b, (1, cout));
                    for r in 0..g.rows() {
                        for t in 0..lout {
                            for (x, y) in gb.as_mut_slice().iter_mut().zip(&g.row(r)[t * cout..(t + 1) * cout]) {
                                *x += y;
                            }
                        }
                    }
                }
                if self.tracked(*w) {
                    let gw = slot(grads, *w, wv.shape());
                    for r in 0..g.rows() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        for t in 0..lout {
                            let go = &gr[t * cout..(t + 1) * cout];
                            for j in 0..k {
                                let base = (t + j * dil) * cin;
                                for c in 0..cin {
                                    let xval = xr[base + c];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    let row = j * cin + c;
                                    let dst = &mut gw.as_mut_slice()[row * cout..(row + 1) * cout];
                                    for (dv, gv) in dst.iter_mut().zip(go) {
                                        *dv += xval * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.tracked(*x) {
                    let gx = slot(grads, *x, xv.shape());
                    let wsl = wv.as_slice();
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let dst = gx.row_mut(r);
                        for t in 0..lout {
                            let go = &gr[t * cout..(t + 1) * cout];
                            for j in 0..k {
                                let base = (t + j * dil) * cin;
                                for c in 0..cin {
                                    let row = j * cin + c;
                                    let wrow = &wsl[row * cout..(row + 1) * cout];
                                    dst[base + c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            }
            Op::RowMean(a) => {
                let shape = self.value(*a).shape();
                let inv = 1.0 / shape.1 as f64;
                let ga = slot(grads, *a, shape);
                for r in 0..shape.0 {
                    let k = g[(r, 0)] * inv;
                    ga.row_mut(r).iter_mut().for_each(|x| *x += k);
                }
            }
            Op::MeanAll(a) => {
                let shape = self.value(*a).shape();
                let k = g[(0, 0)] / (shape.0 * shape.1) as f64;
                let ga = slot(grads, *a, shape);
                ga.as_mut_slice().iter_mut().for_each(|x| *x += k);
            }
            Op::SoftmaxRows(a) => {
                let ga = slot(grads, *a, g.shape());
                for r in 0..g.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((x, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *x += yv * (gv - dot);
                    }
                }
            }
            Op::WeightedBce(zh, z, omega, eps) => {
                let zv = self.value(*zh);
                let m = z.len() as f64;
                let scale = g[(0, 0)] / m;
                let gz = slot(grads, *zh, zv.shape());
                for ((x, &p), &label) in gz.as_mut_slice().iter_mut().zip(zv.as_slice()).zip(z.iter()) {
                    if p <= *eps || p >= 1.0 - *eps {
                        continue;
                    }
                    *x += -scale * (omega * label / p - (1.0 - label) / (1.0 - p));
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Matrix)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Matrix)> {
        self.params
    }
}
