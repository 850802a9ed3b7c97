//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node owns its value; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that depends on a parameter or on an
//! input created with `requires_grad`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamSet};
use super::tensor::{softmax_in_place, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, s: R },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<R>, rstd: Vec<R> },
    Softmax { a: usize },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    Gather { table: usize, idx: Vec<usize> },
    Dropout { a: usize, mask: Vec<R> },
    CrossEntropy { logits: usize, targets: Vec<usize>, scale: R, probs: Tensor<R> },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Recording tape. Build one per forward pass.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    param_nodes: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    non_finite: Option<(&'static str, usize)>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout_rng: None,
            non_finite: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from a generator seeded
    /// with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Error if any recorded value has been non-finite.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.non_finite {
            None => Ok(()),
            Some((op, idx)) => Err(Error::Numeric(format!(
                "non-finite value produced by `{op}` (node {idx})"
            ))),
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some((op.name(), idx));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Backprop::grad`].
    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated lookups of the same id share one node.
    pub fn param(&mut self, params: &ParamSet<R>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .matmul_t(ta, &self.nodes[b.0].value, tb)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let mut value = x.clone();
        value.add_assign(y);
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    /// Broadcast-add a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} cannot broadcast onto {:?}",
                r.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        let c = x.cols();
        for chunk in value.data_mut().chunks_mut(c.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let ng = self.ng(a.0) || self.ng(row.0);
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.ng(a.0);
        self.push(value, Op::Scale { a: a.0, s }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu);
        let ng = self.ng(a.0);
        self.push(value, Op::Gelu { a: a.0 }, ng)
    }

    /// Per-row normalisation followed by an affine map with `1 x c` gain and
    /// shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[shift.0].value);
        let c = xv.cols();
        if g.shape() != [1, c] || b.shape() != [1, c] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / shift {:?} vs input {:?}",
                g.shape(),
                b.shape(),
                xv.shape()
            )));
        }
        let n = R::of(c as f64);
        let eps = R::of(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut value = Tensor::zeros(xv.rows(), c);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let rs = R::ONE / (var + eps).sqrt();
            rstd.push(rs);
            let out = value.row_mut(r);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out[j] = h * g.data()[j] + b.data()[j];
            }
        }
        let ng = self.ng(x.0) || self.ng(gain.0) || self.ng(shift.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise softmax. `mask` (row-major, same shape as `a`) marks allowed
    /// entries; disallowed entries get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (rows, cols) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::Shape(format!(
                    "softmax mask of length {} for {:?}",
                    m.len(),
                    x.shape()
                )));
            }
        }
        let mut value = x.clone();
        for r in 0..rows {
            let row = value.row_mut(r);
            match mask {
                None => softmax_in_place(row),
                Some(m) => {
                    let allowed = &m[r * cols..(r + 1) * cols];
                    if !allowed.iter().any(|&b| b) {
                        return Err(Error::Attention(format!(
                            "row {r} has every key masked"
                        )));
                    }
                    let mut mx = None;
                    for (v, &ok) in row.iter().zip(allowed) {
                        if ok {
                            mx = Some(match mx {
                                None => *v,
                                Some(m) => R::max(m, *v),
                            });
                        }
                    }
                    let mx = mx.expect("at least one allowed entry");
                    let mut s = R::ZERO;
                    for (v, &ok) in row.iter_mut().zip(allowed) {
                        *v = if ok { (*v - mx).exp() } else { R::ZERO };
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
            }
        }
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::Softmax { a: a.0 }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if start + len > x.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) out of {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut value = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if start + len > x.rows() {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) out of {:?}",
                start + len,
                x.shape()
            )));
        }
        let c = x.cols();
        let value = Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::SliceRows { a: a.0, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.nodes[p.0].value.rows())
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: {} rows vs {rows}",
                    v.rows()
                )));
            }
            cols += v.cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.nodes[p.0].value.cols())
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {} cols vs {cols}",
                    v.cols()
                )));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
        ))
    }

    /// Select rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Shape(format!(
                    "gather index {i} out of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(idx.len(), c, data)?;
        let ng = self.ng(table.0);
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        if p <= 0.0 {
            return a;
        }
        let keep = R::of(1.0 / (1.0 - p));
        let x = &self.nodes[a.0].value;
        let mask: Vec<R> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { R::ZERO } else { keep })
            .collect();
        let mut value = x.clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.ng(a.0);
        self.push(value, Op::Dropout { a: a.0, mask }, ng)
    }

    /// `scale * sum_r -log softmax(logits_r)[targets_r]` as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], scale: f64) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if targets.len() != z.rows() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {:?} logits",
                targets.len(),
                z.shape()
            )));
        }
        let probs = z.softmax_rows();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= z.cols() {
                return Err(Error::Data(format!(
                    "target class {t} out of range for {} classes",
                    z.cols()
                )));
            }
            let row = z.row(r);
            let mx = row.iter().fold(row[0], |m, &v| R::max(m, v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<R>().ln();
            total += (lse - row[t]).to_f64();
        }
        let value = Tensor::row_vector(vec![R::of(total * scale)]);
        let ng = self.ng(logits.0);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                scale: R::of(scale),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Result<Backprop<R>> {
        if self.shape(out) != [1, 1] {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, Tensor::filled(1, 1, R::ONE))
    }

    /// Reverse pass seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<R>) -> Result<Backprop<R>> {
        self.ensure_finite()?;
        if seed.shape() != self.shape(out) {
            return Err(Error::Shape(format!(
                "seed gradient {:?} for output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Backprop { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, n) = (g.rows(), g.cols());
                let k = if *ta { av.rows() } else { av.cols() };
                if want(*a) {
                    let ga = slot(grads, *a, av);
                    if *ta {
                        // d(stored A) = op(B) * dC^T
                        R::gemm(k, n, m, bv.data(), *tb, g.data(), true, ga.data_mut(), R::ONE);
                    } else {
                        R::gemm(m, n, k, g.data(), false, bv.data(), !*tb, ga.data_mut(), R::ONE);
                    }
                }
                if want(*b) {
                    let gb = slot(grads, *b, bv);
                    if *tb {
                        // d(stored B) = dC^T * op(A)
                        R::gemm(n, m, k, g.data(), true, av.data(), *ta, gb.data_mut(), R::ONE);
                    } else {
                        R::gemm(k, m, n, av.data(), !*ta, g.data(), false, gb.data_mut(), R::ONE);
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if want(j) {
                        slot(grads, j, &nodes[j].value).add_assign(g);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if want(*a) {
                    slot(grads, *a, &nodes[*a].value).add_assign(g);
                }
                if want(*row) {
                    let gr = slot(grads, *row, &nodes[*row].value);
                    let c = g.cols();
                    for chunk in g.data().chunks(c.max(1)) {
                        for (o, &v) in gr.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                if want(*a) {
                    let ga = slot(grads, *a, &nodes[*a].value);
                    for (o, &v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += v * *s;
                    }
                }
            }
            Op::Gelu { a } => {
                if want(*a) {
                    let x = &nodes[*a].value;
                    let ga = slot(grads, *a, x);
                    for ((o, &v), &xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += v * gelu_grad(xv);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let c = g.cols();
                let gv = nodes[*gain].value.data();
                if want(*gain) {
                    let gg = slot(grads, *gain, &nodes[*gain].value);
                    for (r, gr) in g.data().chunks(c).enumerate() {
                        for j in 0..c {
                            gg.data_mut()[j] += gr[j] * xhat[r * c + j];
                        }
                    }
                }
                if want(*shift) {
                    let gs = slot(grads, *shift, &nodes[*shift].value);
                    for gr in g.data().chunks(c) {
                        for j in 0..c {
                            gs.data_mut()[j] += gr[j];
                        }
                    }
                }
                if want(*x) {
                    let gx = slot(grads, *x, &nodes[*x].value);
                    let n = R::of(c as f64);
                    let mut dxhat = vec![R::ZERO; c];
                    for (r, gr) in g.data().chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = R::ZERO;
                        let mut mean_dx = R::ZERO;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = gx.row_mut(r);
                        for j in 0..c {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if want(*a) {
                    let y = &node.value;
                    let ga = slot(grads, *a, &nodes[*a].value);
                    let c = y.cols();
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: R = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        let out = ga.row_mut(r);
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if want(*a) {
                    let ga = slot(grads, *a, &nodes[*a].value);
                    let len = g.cols();
                    for r in 0..g.rows() {
                        for (o, &v) in ga.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if want(*a) {
                    let ga = slot(grads, *a, &nodes[*a].value);
                    let c = g.cols();
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (o, &v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = &nodes[p].value;
                    let w = pv.cols();
                    if want(p) {
                        let gp = slot(grads, p, pv);
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pv = &nodes[p].value;
                    let n = pv.len();
                    if want(p) {
                        let gp = slot(grads, p, pv);
                        for (o, &v) in gp.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                }
            }
            Op::Gather { table, idx } => {
                if want(*table) {
                    let gt = slot(grads, *table, &nodes[*table].value);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if want(*a) {
                    let ga = slot(grads, *a, &nodes[*a].value);
                    for ((o, &v), &m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                if want(*logits) {
                    let up = g.data()[0] * *scale;
                    let gl = slot(grads, *logits, &nodes[*logits].value);
                    for (r, &t) in targets.iter().enumerate() {
                        let (p, out) = (probs.row(r), gl.row_mut(r));
                        for j in 0..p.len() {
                            let y = if j == t { R::ONE } else { R::ZERO };
                            out[j] += up * (p[j] - y);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a, R: Real>(grads: &'a mut [Option<Tensor<R>>], i: usize, like: &Tensor<R>) -> &'a mut Tensor<R> {
    grads[i].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<R: Real>(x: R) -> R {
    let c = R::of(GELU_C);
    let u = c * (x + R::of(0.044715) * x * x * x);
    R::of(0.5) * x * (R::ONE + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::of(GELU_C);
    let u = c * (x + R::of(0.044715) * x * x * x);
    let t = u.tanh();
    let du = c * (R::ONE + R::of(3.0 * 0.044715) * x * x);
    R::of(0.5) * (R::ONE + t) + R::of(0.5) * x * (R::ONE - t * t) * du
}

/// Result of a reverse pass.
pub struct Backprop<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Backprop<R> {
    /// Gradient of a node, if it received any.
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads[v.0].as_ref()
    }

    /// Collect parameter gradients, zero for parameters the output does not
    /// depend on.
    pub fn param_grads(&self, graph: &Graph<R>, params: &ParamSet<R>) -> Grads<R> {
        let mut out = params.zeros_like();
        self.accumulate_into(graph, &mut out);
        out
    }

    pub fn accumulate_into(&self, graph: &Graph<R>, out: &mut Grads<R>) {
        for (&id, &v) in &graph.param_nodes {
            if let Some(g) = &self.grads[v.0] {
                out.get_mut(id).add_assign(g);
            }
        }
    }
}
