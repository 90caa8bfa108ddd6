//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! replays the records in reverse order; gradient contributions are summed in
//! tape order, so results are bitwise reproducible for a given input.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_blocks, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    MeanPool {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    DivScalar(Var, Var),
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    dims: Vec<usize>,
    value: Value,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients indexed by `ParamId`.
    pub fn params(&self) -> &[Option<Vec<f64>>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

/// Records one forward pass.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates without keeping backward records.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut t = Self::with_params(params);
        t.record = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.expect("param tape").get(*id).data(),
        }
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_slice(self.dims(v), self.value(v)).expect("tape node shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let tracked = tracked && self.record;
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            dims,
            value: Value::Owned(data),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t`; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, tracked)
    }

    pub fn constant(&mut self, dims: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(dims, data)?;
        Ok(self.push(t.dims().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// References a stored parameter without copying it. Repeated calls
    /// return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape was created without parameters");
        let t = store.get(id);
        let tracked = t.requires_grad && self.record;
        self.nodes.push(Node {
            dims: t.dims().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn tracked2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].tracked || self.nodes[b.0].tracked
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.dims(v) {
            [m, n] => Ok((*m, *n)),
            d => Err(Error::Shape(format!("expected a matrix, got dims {d:?}"))),
        }
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a)?;
        let (k2, n) = self.matrix_dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked2(a, b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x)?;
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), tracked))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked2(a, b);
        self.push(self.dims(a).to_vec(), out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a vector of length `dims[last]` to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.dims(x).last().unwrap();
        if self.value(row).len() != n {
            return Err(Error::Shape(format!(
                "add_row: row of length {} for last dim {n}",
                self.value(row).len()
            )));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let tracked = self.tracked2(x, row);
        Ok(self.push(self.dims(x).to_vec(), out, Op::AddRow(x, row), tracked))
    }

    /// Scales column `j` of every row by `w[j]` (per-channel weighting).
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let n = *self.dims(x).last().unwrap();
        if self.value(w).len() != n {
            return Err(Error::Shape(format!(
                "mul_row: weight of length {} for last dim {n}",
                self.value(w).len()
            )));
        }
        let r = self.value(w);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a * b))
            .collect();
        let tracked = self.tracked2(x, w);
        Ok(self.push(self.dims(x).to_vec(), out, Op::MulRow(x, w), tracked))
    }

    /// Scales row `i` of a matrix by `w[i]` (per-position weighting).
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x)?;
        if self.value(w).len() != m {
            return Err(Error::Shape(format!(
                "mul_col: weight of length {} for {m} rows",
                self.value(w).len()
            )));
        }
        let c = self.value(w);
        let out = self
            .value(x)
            .chunks(n)
            .zip(c)
            .flat_map(|(row, s)| row.iter().map(move |a| a * s))
            .collect();
        let tracked = self.tracked2(x, w);
        Ok(self.push(vec![m, n], out, Op::MulCol(x, w), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let tracked = self.is_tracked(x);
        self.push(self.dims(x).to_vec(), out, Op::Scale(x, c), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let tracked = self.is_tracked(x);
        self.push(self.dims(x).to_vec(), out, Op::Sigmoid(x), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let tracked = self.is_tracked(x);
        self.push(self.dims(x).to_vec(), out, Op::Gelu(x), tracked)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_blocks(self.dims(x), axis)?;
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(self.dims(x).to_vec(), out, Op::Softmax { x, axis }, tracked))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let (outer, len, inner) = axis_blocks(&dims, axis)?;
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = o * len * inner + k * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_dims: Vec<usize> = dims.clone();
        new_dims.remove(axis);
        if new_dims.is_empty() {
            new_dims.push(1);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(new_dims, out, Op::MeanPool { x, axis }, tracked))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.dims(x).last().unwrap();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape("layer_norm: gain/bias length".into()));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gain) || self.is_tracked(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(self.dims(x).to_vec(), out, op, tracked))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let (outer, full, inner) = axis_blocks(&dims, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for axis of length {full}",
                start + len
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_dims = dims;
        new_dims[axis] = len;
        let tracked = self.is_tracked(x);
        Ok(self.push(new_dims, out, Op::Narrow { x, axis, start }, tracked))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let dims0 = self.dims(*first).to_vec();
        let (outer, _, inner) = axis_blocks(&dims0, axis)?;
        let mut total = 0;
        for &x in xs {
            let d = self.dims(x);
            let compatible =
                d.len() == dims0.len() && d.iter().zip(&dims0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat along {axis}: {d:?} vs {dims0:?}")));
            }
            total += d[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let chunk = self.dims(x)[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut new_dims = dims0;
        new_dims[axis] = total;
        let tracked = xs.iter().any(|&x| self.is_tracked(x));
        let op = Op::Concat { xs: xs.to_vec(), axis };
        Ok(self.push(new_dims, out, op, tracked))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.value(x).len() || dims.is_empty() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims(x))));
        }
        let out = self.value(x).to_vec();
        let tracked = self.is_tracked(x);
        Ok(self.push(dims.to_vec(), out, Op::Reshape(x), tracked))
    }

    /// Picks flat elements of `x` by index into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= src.len()) {
            return Err(Error::Shape(format!(
                "gather indices {idx:?} out of range for {} elements",
                src.len()
            )));
        }
        let out = idx.iter().map(|&i| src[i]).collect();
        let tracked = self.is_tracked(x);
        let op = Op::Gather { x, idx: idx.to_vec() };
        Ok(self.push(vec![idx.len()], out, op, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.is_tracked(x);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    /// Divides every element of `x` by the single-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("div_scalar: divisor must be a scalar".into()));
        }
        let d = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v / d).collect();
        let tracked = self.tracked2(x, s);
        Ok(self.push(self.dims(x).to_vec(), out, Op::DivScalar(x, s), tracked))
    }

    /// Mean Smooth-L1 between `pred` and a constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::Shape(format!(
                "smooth_l1: {} predictions for {} targets",
                p.len(),
                target.len()
            )));
        }
        let loss = crate::metrics::smooth_l1(p, target, beta)?;
        let tracked = self.is_tracked(pred);
        let op = Op::SmoothL1 {
            pred,
            target: target.to_vec(),
            beta,
        };
        Ok(self.push(vec![1], vec![loss], op, tracked))
    }

    /// Reverse pass from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ld = self.dims(loss);
        if ld.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ld.to_vec()));
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut param_grads: Vec<Option<Vec<f64>>> = Vec::new();
        param_grads.resize_with(n_params, || None);

        if !self.nodes[loss.0].tracked {
            return Ok(Gradients {
                nodes: grads,
                params: param_grads,
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Value::Param(id) = node.value {
                    param_grads[id.0] = grads[idx].clone();
                }
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, idx, &g, &mut grads);
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn backprop_node(&self, node: &Node, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            da[i * k + kk] += dot(grow, brow);
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik != 0.0 {
                                axpy(aik, grow, &mut db[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| axpy(1.0, g, da));
                self.accumulate(grads, *b, |db| axpy(1.0, g, db));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| axpy(1.0, g, da));
                self.accumulate(grads, *b, |db| axpy(-1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, b))| *d += g * b)
                });
                self.accumulate(grads, *b, |db| {
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, a))| *d += g * a)
                });
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).len();
                self.accumulate(grads, *x, |dx| axpy(1.0, g, dx));
                self.accumulate(grads, *row, |dr| {
                    for c in g.chunks(n) {
                        axpy(1.0, c, dr);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let n = self.value(*w).len();
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.accumulate(grads, *x, |dx| {
                    for (dc, gc) in dx.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dc[j] += gc[j] * wv[j];
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for (xc, gc) in xv.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dw[j] += gc[j] * xc[j];
                        }
                    }
                });
            }
            Op::MulCol(x, w) => {
                let n = self.dims(*x)[1];
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.accumulate(grads, *x, |dx| {
                    for ((dc, gc), s) in dx.chunks_mut(n).zip(g.chunks(n)).zip(wv) {
                        axpy(*s, gc, dc);
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for (i, (xc, gc)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                        dw[i] += dot(xc, gc);
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |dx| axpy(*c, g, dx)),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |dx| {
                for ((d, gi), y) in dx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(v);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_blocks(&node.dims, *axis).unwrap();
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let s: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                            for k in 0..len {
                                dx[at(k)] += out[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::MeanPool { x, axis } => {
                let (outer, len, inner) = axis_blocks(self.dims(*x), *axis).unwrap();
                let inv = 1.0 / len as f64;
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        for k in 0..len {
                            let base = o * len * inner + k * inner;
                            for i in 0..inner {
                                dx[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain);
                self.accumulate(grads, *gain, |dg| {
                    for (gc, hc) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gc[j] * hc[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gc in g.chunks(n) {
                        axpy(1.0, gc, db);
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    let mut dh = vec![0.0; n];
                    for (r, ((dc, gc), hc)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gc[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dot(&dh, hc) / n as f64;
                        for j in 0..n {
                            dc[j] += rstd[r] * (dh[j] - mean_dh - hc[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_blocks(self.dims(*x), *axis).unwrap();
                let len = node.dims[*axis];
                self.accumulate(grads, *x, |dx| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(1.0, src, &mut dx[base..base + len * inner]);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_blocks(&node.dims, *axis).unwrap();
                let mut offset = 0;
                for &x in xs {
                    let len = self.dims(x)[*axis];
                    self.accumulate(grads, x, |dx| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            axpy(
                                1.0,
                                &g[src..src + len * inner],
                                &mut dx[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |dx| axpy(1.0, g, dx)),
            Op::Gather { x, idx } => self.accumulate(grads, *x, |dx| {
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += g[k];
                }
            }),
            Op::Sum(x) => self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::DivScalar(x, s) => {
                let sv = self.value(*s)[0];
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| axpy(1.0 / sv, g, dx));
                self.accumulate(grads, *s, |ds| {
                    ds[0] -= dot(g, xv) / (sv * sv);
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let pv = self.value(*pred);
                let scale = g[0] / pv.len() as f64;
                self.accumulate(grads, *pred, |dp| {
                    for ((d, p), t) in dp.iter_mut().zip(pv).zip(target) {
                        let diff = p - t;
                        let local = if diff.abs() < *beta { diff } else { diff.signum() };
                        *d += scale * local;
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let len = node.dims.iter().product();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                axpy(aik, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
}
