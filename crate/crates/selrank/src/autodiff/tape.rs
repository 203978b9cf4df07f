//! Reverse-mode differentiation over a flat expression tape.
//!
//! Nodes are appended in evaluation order, so a reverse index sweep visits
//! every consumer before its producers. Parameters enter the graph as leaf
//! copies; [`Tape::backward`] accumulates their adjoints into the owning
//! [`ParamStore`], refusing to run if the store has stepped since the tape
//! was built.

use crate::error::{Error, Result};

use super::kernels::{self, NORM_EPS, POOL_EPS};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::KernelConfig;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param {
        id: ParamId,
    },
    EmbedRows {
        table: ParamId,
        ids: Vec<u32>,
    },
    Conv1dGrams {
        input: Var,
        filters: Var,
        bias: Var,
        h: usize,
    },
    CosineMatrix {
        a: Var,
        b: Var,
    },
    KernelPool {
        m: Var,
        mus: Vec<f64>,
        deltas: Vec<f64>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Log {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Pick {
        x: Var,
        idx: usize,
    },
    MaxOverRows {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    SumScalars {
        parts: Vec<Var>,
    },
    Hinge {
        pos: Var,
        neg: Var,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params_version: u64,
}

impl Tape {
    pub fn new(store: &ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            params_version: store.version(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.all_finite(), "non-finite node value");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    /// Leaf copy of a whole parameter tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Param { id }, store.value(id).clone())
    }

    /// Gather rows of a 2-d parameter (an embedding table) into an
    /// m x dim leaf. Backward scatters back into the table gradient.
    pub fn embed_rows(&mut self, store: &ParamStore, table: ParamId, ids: &[u32]) -> Result<Var> {
        let t = store.value(table);
        if t.shape().len() != 2 {
            return Err(Error::Shape("embed_rows needs a 2-d table".into()));
        }
        if ids.is_empty() {
            return Err(Error::Shape("embed_rows needs at least one row".into()));
        }
        let dim = t.cols();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let r = id as usize;
            if r >= t.rows() {
                return Err(Error::Data(format!(
                    "token id {} outside embedding table of {} rows",
                    r,
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::from_vec(&[ids.len(), dim], data)?;
        Ok(self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn conv1d_grams(&mut self, input: Var, filters: Var, bias: Var, h: usize) -> Result<Var> {
        let value = kernels::conv1d_grams_forward(
            self.value(input),
            self.value(filters),
            self.value(bias),
            h,
        )?;
        Ok(self.push(
            Op::Conv1dGrams {
                input,
                filters,
                bias,
                h,
            },
            value,
        ))
    }

    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::cosine_forward(self.value(a), self.value(b))?;
        Ok(self.push(Op::CosineMatrix { a, b }, value))
    }

    pub fn kernel_pool(&mut self, m: Var, cfg: &KernelConfig) -> Result<Var> {
        let value = kernels::kernel_pool_forward(self.value(m), cfg)?;
        Ok(self.push(
            Op::KernelPool {
                m,
                mus: cfg.mus().to_vec(),
                deltas: cfg.deltas().to_vec(),
            },
            value,
        ))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::affine_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Affine { x, w, b }, value))
    }

    /// `activation(w . x + b)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let lin = self.affine(x, w, b)?;
        Ok(match act {
            Activation::None => lin,
            Activation::Relu => self.relu(lin),
            Activation::Tanh => self.tanh(lin),
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            let mut out = xv.clone();
            out.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            out
        };
        self.push(Op::Relu { x }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = {
            let mut out = self.value(x).clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
            out
        };
        self.push(Op::Tanh { x }, value)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= 0.0) {
            return Err(Error::Data("log of a non-positive value".into()));
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.ln());
        Ok(self.push(Op::Log { x }, out))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let p = softmax_vec(self.value(x))?;
        Ok(self.push(Op::Softmax { x }, Tensor::vector(p)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || xv.is_empty() {
            return Err(Error::Shape("log_softmax needs a non-empty vector".into()));
        }
        if !xv.all_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let mx = xv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = xv
            .data()
            .iter()
            .map(|v| (v - mx).exp())
            .sum::<f64>()
            .ln()
            + mx;
        let out: Vec<f64> = xv.data().iter().map(|v| v - lse).collect();
        Ok(self.push(Op::LogSoftmax { x }, Tensor::vector(out)))
    }

    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 1 || idx >= xv.len() {
            return Err(Error::Shape(format!(
                "pick index {} out of bounds for {:?}",
                idx,
                xv.shape()
            )));
        }
        let value = Tensor::scalar(xv.data()[idx]);
        Ok(self.push(Op::Pick { x, idx }, value))
    }

    /// Column-wise maximum of a 2-d input: (m x f) -> (f).
    pub fn max_over_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() == 0 {
            return Err(Error::Shape("max_over_rows needs a non-empty matrix".into()));
        }
        let mut out = xv.row(0).to_vec();
        for i in 1..xv.rows() {
            for (f, o) in out.iter_mut().enumerate() {
                let v = xv.at2(i, f);
                if v > *o {
                    *o = v;
                }
            }
        }
        Ok(self.push(Op::MaxOverRows { x }, Tensor::vector(out)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of no parts".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape().len() != 1 {
                return Err(Error::Shape("concat expects 1-d parts".into()));
            }
            data.extend_from_slice(v.data());
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::vector(data),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = elementwise(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = elementwise(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(Op::Scale { x, c }, out)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(Op::AddScalar { x }, out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for p in parts {
            s += self.value(*p).as_scalar()?;
        }
        Ok(self.push(
            Op::SumScalars {
                parts: parts.to_vec(),
            },
            Tensor::scalar(s),
        ))
    }

    /// Pairwise hinge `max(0, 1 - pos + neg)` on two scalars.
    pub fn hinge(&mut self, pos: Var, neg: Var) -> Result<Var> {
        let p = self.value(pos).as_scalar()?;
        let n = self.value(neg).as_scalar()?;
        let value = Tensor::scalar((1.0 - p + n).max(0.0));
        Ok(self.push(Op::Hinge { pos, neg }, value))
    }

    /// Adjoints of every node with respect to the scalar `root`.
    ///
    /// Entries stay `None` where the root does not depend on the node.
    pub fn adjoints(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        if !self.value(root).is_scalar() && self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let g = match &adj[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(idx, &g, &mut adj);
        }
        Ok(adj)
    }

    /// Back-propagate from a scalar root, accumulating parameter adjoints
    /// into `store` gradients. Errors if the store's values changed after
    /// this tape was built.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        if store.version() != self.params_version {
            return Err(Error::StaleTape);
        }
        let adj = self.adjoints(root)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = match &adj[idx] {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Param { id } => {
                    let grad = store.grad_mut(*id);
                    for (gv, av) in grad.data_mut().iter_mut().zip(g.data()) {
                        *gv += av;
                    }
                }
                Op::EmbedRows { table, ids } => {
                    let grad = store.grad_mut(*table);
                    let dim = grad.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * dim;
                        for c in 0..dim {
                            grad.data_mut()[dst + c] += g.at2(r, c);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Const | Op::Param { .. } | Op::EmbedRows { .. } => {}
            Op::Conv1dGrams {
                input,
                filters,
                bias,
                h,
            } => {
                let e = self.value(*input);
                let w = self.value(*filters);
                let m = e.rows();
                let dim = e.cols();
                let nf = w.cols();
                let out = &node.value;
                let mut ge = Tensor::zeros(e.shape());
                let mut gw = Tensor::zeros(w.shape());
                let mut gb = vec![0.0; nf];
                for i in 0..m {
                    for f in 0..nf {
                        if out.at2(i, f) <= 0.0 {
                            continue; // relu gate closed
                        }
                        let d = g.at2(i, f);
                        gb[f] += d;
                        for j in 0..*h {
                            if i + j >= m {
                                break;
                            }
                            for c in 0..dim {
                                let wr = j * dim + c;
                                gw.data_mut()[wr * nf + f] += e.at2(i + j, c) * d;
                                ge.data_mut()[(i + j) * dim + c] += w.at2(wr, f) * d;
                            }
                        }
                    }
                }
                accumulate(adj, *input, &ge);
                accumulate(adj, *filters, &gw);
                accumulate(adj, *bias, &Tensor::vector(gb));
            }
            Op::CosineMatrix { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let out = &node.value;
                let na: Vec<f64> = (0..av.rows()).map(|i| kernels::norm(av.row(i))).collect();
                let nb: Vec<f64> = (0..bv.rows()).map(|j| kernels::norm(bv.row(j))).collect();
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                let f = av.cols();
                for i in 0..av.rows() {
                    if na[i] < NORM_EPS {
                        continue;
                    }
                    for j in 0..bv.rows() {
                        if nb[j] < NORM_EPS {
                            continue;
                        }
                        let d = g.at2(i, j);
                        if d == 0.0 {
                            continue;
                        }
                        let mij = out.at2(i, j);
                        let inv = 1.0 / (na[i] * nb[j]);
                        for c in 0..f {
                            ga.data_mut()[i * f + c] +=
                                d * (bv.at2(j, c) * inv - mij * av.at2(i, c) / (na[i] * na[i]));
                            gb.data_mut()[j * f + c] +=
                                d * (av.at2(i, c) * inv - mij * bv.at2(j, c) / (nb[j] * nb[j]));
                        }
                    }
                }
                accumulate(adj, *a, &ga);
                accumulate(adj, *b, &gb);
            }
            Op::KernelPool { m, mus, deltas } => {
                let mv = self.value(*m);
                let mut gm = Tensor::zeros(mv.shape());
                for (k, (&mu, &delta)) in mus.iter().zip(deltas.iter()).enumerate() {
                    let gk = g.data()[k];
                    if gk == 0.0 {
                        continue;
                    }
                    let two_d2 = 2.0 * delta * delta;
                    for i in 0..mv.rows() {
                        let mut inner = 0.0;
                        for j in 0..mv.cols() {
                            let d = mv.at2(i, j) - mu;
                            inner += (-d * d / two_d2).exp();
                        }
                        if inner <= POOL_EPS {
                            continue; // clamped branch: zero gradient
                        }
                        let coef = gk / inner;
                        for j in 0..mv.cols() {
                            let d = mv.at2(i, j) - mu;
                            let w = (-d * d / two_d2).exp();
                            gm.data_mut()[i * mv.cols() + j] += coef * w * (-d / (delta * delta));
                        }
                    }
                }
                accumulate(adj, *m, &gm);
            }
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut gx = Tensor::zeros(xv.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let n = xv.len();
                for o in 0..wv.rows() {
                    let d = g.data()[o];
                    if d == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        gx.data_mut()[c] += d * wv.at2(o, c);
                        gw.data_mut()[o * n + c] += d * xv.data()[c];
                    }
                }
                accumulate(adj, *x, &gx);
                accumulate(adj, *w, &gw);
                accumulate(adj, *b, g);
            }
            Op::Relu { x } => {
                let mut gx = g.clone();
                for (v, o) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if *o <= 0.0 {
                        *v = 0.0;
                    }
                }
                accumulate(adj, *x, &gx);
            }
            Op::Tanh { x } => {
                let mut gx = g.clone();
                for (v, o) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= 1.0 - o * o;
                }
                accumulate(adj, *x, &gx);
            }
            Op::Log { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (v, xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                    *v /= xi;
                }
                accumulate(adj, *x, &gx);
            }
            Op::Softmax { x } => {
                let p = node.value.data();
                let s: f64 = g.data().iter().zip(p).map(|(gi, pi)| gi * pi).sum();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(p)
                    .map(|(gi, pi)| pi * (gi - s))
                    .collect();
                accumulate(adj, *x, &Tensor::vector(gx));
            }
            Op::LogSoftmax { x } => {
                let s: f64 = g.data().iter().sum();
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gi, li)| gi - li.exp() * s)
                    .collect();
                accumulate(adj, *x, &Tensor::vector(gx));
            }
            Op::Pick { x, idx: pick_idx } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.data_mut()[*pick_idx] = g.data()[0];
                accumulate(adj, *x, &gx);
            }
            Op::MaxOverRows { x } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for f in 0..xv.cols() {
                    // first row attaining the maximum takes the gradient
                    let mut best = 0usize;
                    for i in 1..xv.rows() {
                        if xv.at2(i, f) > xv.at2(best, f) {
                            best = i;
                        }
                    }
                    gx.data_mut()[best * xv.cols() + f] = g.data()[f];
                }
                accumulate(adj, *x, &gx);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let part = Tensor::vector(g.data()[off..off + len].to_vec());
                    accumulate(adj, *p, &part);
                    off += len;
                }
            }
            Op::Add { a, b } => {
                accumulate(adj, *a, g);
                accumulate(adj, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(adj, *a, g);
                let mut neg = g.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                accumulate(adj, *b, &neg);
            }
            Op::Scale { x, c } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= c);
                accumulate(adj, *x, &gx);
            }
            Op::AddScalar { x, .. } => {
                accumulate(adj, *x, g);
            }
            Op::SumAll { x } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                gx.fill(g.data()[0]);
                accumulate(adj, *x, &gx);
            }
            Op::SumScalars { parts } => {
                for p in parts {
                    accumulate(adj, *p, g);
                }
            }
            Op::Hinge { pos, neg } => {
                if node.value.data()[0] > 0.0 {
                    let mut neg_g = g.clone();
                    neg_g.data_mut().iter_mut().for_each(|v| *v = -*v);
                    accumulate(adj, *pos, &neg_g);
                    accumulate(adj, *neg, g);
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, delta: &Tensor) {
    match &mut adj[v.0] {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise op on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

fn softmax_vec(x: &Tensor) -> Result<Vec<f64>> {
    if x.shape().len() != 1 || x.is_empty() {
        return Err(Error::Shape("softmax needs a non-empty vector".into()));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mx = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.data().iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= z);
    Ok(e)
}
