//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation records a node holding the forward value, the parent
//! node ids, and a backward rule mapping the output gradient to one
//! gradient per parent. Node ids are monotone, so reverse insertion order
//! is a valid reverse topological order and [`backward`] is a single
//! reverse sweep with additive accumulation across fan-out.

use alloc::boxed::Box;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{strides, Tensor};

/// Forward-pass mode; train mode enables dropout and batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type GradFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Tensor<T>,
    parents: Vec<Var>,
    grad_fn: Option<GradFn<T>>,
    requires_grad: bool,
}

/// Batch statistics produced by train-mode batch normalization, used by the
/// caller to update running estimates.
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    validate: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            validate: cfg!(debug_assertions),
        }
    }

    /// Toggle NaN/Inf validation of every forward value (defaults to on in
    /// debug builds).
    pub fn with_validation(mut self, validate: bool) -> Self {
        self.validate = validate;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        grad_fn: Option<GradFn<T>>,
    ) -> Result<Var> {
        if self.validate {
            value.validate_finite()?;
        }
        let requires_grad =
            grad_fn.is_some() && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that participates in differentiation (a model parameter).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no gradient (network input or constant).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            grad_fn: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- elementwise binary -----

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if !self.nodes[a.0].value.same_shape(&self.nodes[b.0].value) {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Tensor<T>| {
                vec![Some(g.clone()), Some(g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g: &Tensor<T>| {
                vec![Some(g.clone()), Some(g.map(|v| -v))]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = zip_map(&av, &bv, |x, y| x * y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(zip_map(g, &bv, |x, y| x * y)), Some(zip_map(g, &av, |x, y| x * y))]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g: &Tensor<T>| vec![Some(g.map(|v| v * c))])),
        )
    }

    /// Broadcast-add a vector `b` along dimension `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::Shape(format!(
                "add_bias: bias {bs:?} does not fit axis {axis} of {xs:?}"
            )));
        }
        let st = strides(&xs);
        let (stride, dim) = (st[axis], xs[axis]);
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + bv[(i / stride) % dim];
        }
        let out = Tensor::new(xs, out)?;
        self.push(
            out,
            vec![x, b],
            Some(Box::new(move |g: &Tensor<T>| {
                let mut db = vec![T::zero(); dim];
                for (i, gv) in g.data().iter().enumerate() {
                    let j = (i / stride) % dim;
                    db[j] = db[j] + *gv;
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::new(vec![dim], db).expect("bias grad shape")),
                ]
            })),
        )
    }

    // ----- linear algebra -----

    /// `x` of shape `[..., k]` times a shared matrix `w` of shape `[k, m]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::Shape(format!(
                "matmul: {xs:?} x {ws:?} inner dimensions disagree"
            )));
        }
        let (k, m) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / k;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = vec![T::zero(); rows * m];
        mat_mul(xv.data(), wv.data(), &mut out, rows, k, m);
        let mut os = xs.clone();
        *os.last_mut().unwrap() = m;
        let out = Tensor::new(os, out)?;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let dx = need_x.then(|| {
                    // dX = G W^T
                    let mut dx = vec![T::zero(); rows * k];
                    for r in 0..rows {
                        for kk in 0..k {
                            dx[r * k + kk] =
                                dot(&gd[r * m..(r + 1) * m], &wv.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                    Tensor::new(xv.shape().to_vec(), dx).expect("dx shape")
                });
                let dw = need_w.then(|| {
                    // dW = X^T G
                    let mut dw = vec![T::zero(); k * m];
                    for r in 0..rows {
                        for kk in 0..k {
                            axpy(
                                &mut dw[kk * m..(kk + 1) * m],
                                &gd[r * m..(r + 1) * m],
                                xv.data()[r * k + kk],
                            );
                        }
                    }
                    Tensor::new(vec![k, m], dw).expect("dw shape")
                });
                vec![dx, dw]
            })),
        )
    }

    /// Batched matrix product: `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.value(a).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] || as_[2] != bs[1] {
            return Err(Error::Shape(format!("bmm: {as_:?} x {bs:?} incompatible")));
        }
        let (nb, n, k, m) = (as_[0], as_[1], as_[2], bs[2]);
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut out = vec![T::zero(); nb * n * m];
        for i in 0..nb {
            mat_mul(
                &av.data()[i * n * k..(i + 1) * n * k],
                &bv.data()[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let out = Tensor::new(vec![nb, n, m], out)?;
        let need_a = self.requires_grad(a);
        let need_b = self.requires_grad(b);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let da = need_a.then(|| {
                    let mut da = vec![T::zero(); nb * n * k];
                    for i in 0..nb {
                        let gm = &gd[i * n * m..(i + 1) * n * m];
                        let bm = &bv.data()[i * k * m..(i + 1) * k * m];
                        let dm = &mut da[i * n * k..(i + 1) * n * k];
                        for r in 0..n {
                            for kk in 0..k {
                                dm[r * k + kk] =
                                    dot(&gm[r * m..(r + 1) * m], &bm[kk * m..(kk + 1) * m]);
                            }
                        }
                    }
                    Tensor::new(vec![nb, n, k], da).expect("da shape")
                });
                let db = need_b.then(|| {
                    let mut db = vec![T::zero(); nb * k * m];
                    for i in 0..nb {
                        let gm = &gd[i * n * m..(i + 1) * n * m];
                        let am = &av.data()[i * n * k..(i + 1) * n * k];
                        let dm = &mut db[i * k * m..(i + 1) * k * m];
                        for r in 0..n {
                            for kk in 0..k {
                                axpy(&mut dm[kk * m..(kk + 1) * m], &gm[r * m..(r + 1) * m], am[r * k + kk]);
                            }
                        }
                    }
                    Tensor::new(vec![nb, k, m], db).expect("db shape")
                });
                vec![da, db]
            })),
        )
    }

    // ----- convolution and pooling -----

    /// 1-D cross-correlation with "same" zero padding.
    ///
    /// `x`: `[N, C_in, T]`, `w`: `[C_out, C_in, K]` with `K` odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv1d: input {xs:?} and kernel {ws:?} incompatible"
            )));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::Invalid(format!(
                "conv1d: kernel length {} must be odd for same padding",
                ws[2]
            )));
        }
        let (n, ci, t) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let pad = (k - 1) / 2;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = vec![T::zero(); n * co * t];
        {
            let xd = xv.data();
            let wd = wv.data();
            for ni in 0..n {
                for f in 0..co {
                    let orow = &mut out[(ni * co + f) * t..(ni * co + f + 1) * t];
                    for c in 0..ci {
                        let xrow = &xd[(ni * ci + c) * t..(ni * ci + c + 1) * t];
                        for kk in 0..k {
                            let cw = wd[(f * ci + c) * k + kk];
                            axpy_shifted(orow, xrow, cw, kk as isize - pad as isize);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, co, t], out)?;
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let xd = xv.data();
                let wd = wv.data();
                let dx = need_x.then(|| {
                    let mut dx = vec![T::zero(); n * ci * t];
                    for ni in 0..n {
                        for c in 0..ci {
                            let drow = &mut dx[(ni * ci + c) * t..(ni * ci + c + 1) * t];
                            for f in 0..co {
                                let grow = &gd[(ni * co + f) * t..(ni * co + f + 1) * t];
                                for kk in 0..k {
                                    let cw = wd[(f * ci + c) * k + kk];
                                    axpy_shifted(drow, grow, cw, pad as isize - kk as isize);
                                }
                            }
                        }
                    }
                    Tensor::new(vec![n, ci, t], dx).expect("dx shape")
                });
                let dw = need_w.then(|| {
                    let mut dw = vec![T::zero(); co * ci * k];
                    for ni in 0..n {
                        for f in 0..co {
                            let grow = &gd[(ni * co + f) * t..(ni * co + f + 1) * t];
                            for c in 0..ci {
                                let xrow = &xd[(ni * ci + c) * t..(ni * ci + c + 1) * t];
                                for kk in 0..k {
                                    dw[(f * ci + c) * k + kk] = dw[(f * ci + c) * k + kk]
                                        + dot_shifted(grow, xrow, kk as isize - pad as isize);
                                }
                            }
                        }
                    }
                    Tensor::new(vec![co, ci, k], dw).expect("dw shape")
                });
                vec![dx, dw]
            })),
        )
    }

    /// Average pooling with window 2 and stride 2 along the last axis.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let t = *xs.last().ok_or_else(|| Error::Shape("avg_pool2: rank-0 input".into()))?;
        if t % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2: last axis length {t} is odd"
            )));
        }
        let half = T::from_f64(0.5);
        let rows = self.value(x).numel() / t;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); rows * t / 2];
        for r in 0..rows {
            let xi = &xd[r * t..(r + 1) * t];
            let oi = &mut out[r * t / 2..(r + 1) * t / 2];
            for (j, o) in oi.iter_mut().enumerate() {
                *o = (xi[2 * j] + xi[2 * j + 1]) * half;
            }
        }
        let mut os = xs.clone();
        *os.last_mut().unwrap() = t / 2;
        let out = Tensor::new(os, out)?;
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * t];
                for r in 0..rows {
                    let gi = &gd[r * t / 2..(r + 1) * t / 2];
                    let di = &mut dx[r * t..(r + 1) * t];
                    for (j, gv) in gi.iter().enumerate() {
                        let h = *gv * half;
                        di[2 * j] = h;
                        di[2 * j + 1] = h;
                    }
                }
                vec![Some(Tensor::new(xs.clone(), dx).expect("dx shape"))]
            })),
        )
    }

    // ----- normalization -----

    /// Train-mode batch normalization over the channel axis of `[N, C, T]`.
    ///
    /// Normalizes with biased batch statistics and returns them so the
    /// caller can update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("batch_norm: expected [N,C,T], got {xs:?}")));
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        let m = n * t;
        if m == 0 {
            return Err(Error::Data("batch_norm: zero-size batch".into()));
        }
        self.check_norm_params(c, gamma, beta)?;
        let xd = self.value(x).data().to_vec();
        let mf = T::from_f64(m as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                for v in &xd[(ni * c + ci) * t..(ni * c + ci + 1) * t] {
                    s = s + *v;
                }
            }
            mean[ci] = s / mf;
            let mut sq = T::zero();
            for ni in 0..n {
                for v in &xd[(ni * c + ci) * t..(ni * c + ci + 1) * t] {
                    let d = *v - mean[ci];
                    sq = sq + d * d;
                }
            }
            var[ci] = sq / mf;
        }
        let epst = T::from_f64(eps);
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + epst).sqrt()).collect();
        let mut xhat = vec![T::zero(); n * c * t];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * t;
                for j in 0..t {
                    xhat[base + j] = (xd[base + j] - mean[ci]) * inv[ci];
                }
            }
        }
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut out = vec![T::zero(); n * c * t];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * t;
                for j in 0..t {
                    out[base + j] = gv[ci] * xhat[base + j] + bv[ci];
                }
            }
        }
        let out = Tensor::new(xs.clone(), out)?;
        let xhat_t = Tensor::new(xs.clone(), xhat)?;
        let stats = BatchStats {
            mean: Tensor::new(vec![c], mean)?,
            var: Tensor::new(vec![c], var)?,
        };
        let var_ = self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let xh = xhat_t.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * t;
                        let mut sg = T::zero();
                        let mut sgx = T::zero();
                        for j in 0..t {
                            sg = sg + gd[base + j];
                            sgx = sgx + gd[base + j] * xh[base + j];
                        }
                        dbeta[ci] = dbeta[ci] + sg;
                        dgamma[ci] = dgamma[ci] + sgx;
                    }
                }
                let mut dx = vec![T::zero(); n * c * t];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * t;
                        let a = gv[ci] * inv[ci];
                        let mg = dbeta[ci] / mf;
                        let mgx = dgamma[ci] / mf;
                        for j in 0..t {
                            dx[base + j] = a * (gd[base + j] - mg - xh[base + j] * mgx);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx).expect("dx shape")),
                    Some(Tensor::new(vec![c], dgamma).expect("dgamma shape")),
                    Some(Tensor::new(vec![c], dbeta).expect("dbeta shape")),
                ]
            })),
        )?;
        Ok((var_, stats))
    }

    /// Eval-mode batch normalization using running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("batch_norm: expected [N,C,T], got {xs:?}")));
        }
        let (n, c, t) = (xs[0], xs[1], xs[2]);
        self.check_norm_params(c, gamma, beta)?;
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::Shape("batch_norm: running stats length mismatch".into()));
        }
        let epst = T::from_f64(eps);
        let inv: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + epst).sqrt())
            .collect();
        let rm = running_mean.to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * t];
        let mut xhat = vec![T::zero(); n * c * t];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * t;
                for j in 0..t {
                    let xh = (xd[base + j] - rm[ci]) * inv[ci];
                    xhat[base + j] = xh;
                    out[base + j] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let out = Tensor::new(xs.clone(), out)?;
        let xhat_t = Tensor::new(xs, xhat)?;
        self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let xh = xhat_t.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * t;
                        let a = gv[ci] * inv[ci];
                        for j in 0..t {
                            dgamma[ci] = dgamma[ci] + gd[base + j] * xh[base + j];
                            dbeta[ci] = dbeta[ci] + gd[base + j];
                            dx[base + j] = gd[base + j] * a;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(g.shape().to_vec(), dx).expect("dx shape")),
                    Some(Tensor::new(vec![c], dgamma).expect("dgamma shape")),
                    Some(Tensor::new(vec![c], dbeta).expect("dbeta shape")),
                ]
            })),
        )
    }

    fn check_norm_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must have {c} elements"
            )));
        }
        Ok(())
    }

    // ----- activations -----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let y = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(zip_map(g, &y, |gv, yv| {
                    if yv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                }))]
            })),
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let xv = self.value(x).clone();
        let out = xv.map(|v| if v > T::zero() { v } else { v * s });
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(zip_map(g, &xv, |gv, v| {
                    if v > T::zero() {
                        gv
                    } else {
                        gv * s
                    }
                }))]
            })),
        )
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let a = T::from_f64(alpha);
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { a * (v.exp() - T::one()) });
        let y = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                // For x <= 0 the derivative alpha*e^x equals y + alpha.
                vec![Some(zip_map(g, &y, |gv, yv| {
                    if yv > T::zero() {
                        gv
                    } else {
                        gv * (yv + a)
                    }
                }))]
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let y = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(zip_map(g, &y, |gv, yv| gv * yv * (T::one() - yv)))]
            })),
        )
    }

    // ----- regularization -----

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Eval mode is the identity, so callers simply skip the op.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::new(self.value(x).shape().to_vec(), mask)?;
        let out = zip_map(self.value(x), &mask, |v, m| v * m);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(zip_map(g, &mask, |gv, m| gv * m))]
            })),
        )
    }

    // ----- attention building blocks -----

    /// Slice a 1-D tensor: `x[start..start+len]`.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 1 || start + len > xs[0] {
            return Err(Error::Shape(format!(
                "slice1: range {start}..{} out of bounds for {xs:?}",
                start + len
            )));
        }
        let total = xs[0];
        let out = Tensor::new(vec![len], self.value(x).data()[start..start + len].to_vec())?;
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dx = vec![T::zero(); total];
                dx[start..start + len].copy_from_slice(g.data());
                vec![Some(Tensor::new(vec![total], dx).expect("dx shape"))]
            })),
        )
    }

    /// Pairwise sums: `out[..., i, j] = f[..., i] + g[..., j]`.
    pub fn outer_sum(&mut self, f: Var, g: Var) -> Result<Var> {
        self.check_same_shape(f, g, "outer_sum")?;
        let fs = self.value(f).shape().to_vec();
        let n = *fs
            .last()
            .ok_or_else(|| Error::Shape("outer_sum: rank-0 input".into()))?;
        let batches = self.value(f).numel() / n;
        let fd = self.value(f).data();
        let gd = self.value(g).data();
        let mut out = vec![T::zero(); batches * n * n];
        for b in 0..batches {
            for i in 0..n {
                let fi = fd[b * n + i];
                let orow = &mut out[(b * n + i) * n..(b * n + i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = fi + gd[b * n + j];
                }
            }
        }
        let mut os = fs.clone();
        os.push(n);
        let out = Tensor::new(os, out)?;
        self.push(
            out,
            vec![f, g],
            Some(Box::new(move |gr: &Tensor<T>| {
                let grd = gr.data();
                let mut df = vec![T::zero(); batches * n];
                let mut dg = vec![T::zero(); batches * n];
                for b in 0..batches {
                    for i in 0..n {
                        let row = &grd[(b * n + i) * n..(b * n + i + 1) * n];
                        let mut s = T::zero();
                        for (j, v) in row.iter().enumerate() {
                            s = s + *v;
                            dg[b * n + j] = dg[b * n + j] + *v;
                        }
                        df[b * n + i] = s;
                    }
                }
                vec![
                    Some(Tensor::new(fs.clone(), df).expect("df shape")),
                    Some(Tensor::new(fs.clone(), dg).expect("dg shape")),
                ]
            })),
        )
    }

    /// Row softmax over masked entries of the last axis; positions where the
    /// mask is zero get exactly zero. The row maximum over masked entries is
    /// subtracted before exponentiation for numerical stability.
    ///
    /// `e`: `[..., n, n]`, `mask`: `[n, n]` of zeros and ones.
    pub fn masked_row_softmax(&mut self, e: Var, mask: &Tensor<T>) -> Result<Var> {
        let es = self.value(e).shape().to_vec();
        let rank = es.len();
        if rank < 2 || es[rank - 1] != es[rank - 2] {
            return Err(Error::Shape(format!(
                "masked_row_softmax: expected [..., n, n], got {es:?}"
            )));
        }
        let n = es[rank - 1];
        if mask.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "masked_row_softmax: mask shape {:?} does not match n={n}",
                mask.shape()
            )));
        }
        let rows = self.value(e).numel() / n;
        let ed = self.value(e).data();
        let md = mask.data();
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let mrow = &md[(r % n) * n..(r % n + 1) * n];
            let erow = &ed[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            let mut mx = T::neg_infinity();
            for j in 0..n {
                if mrow[j] > T::zero() && erow[j] > mx {
                    mx = erow[j];
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::Invalid(format!(
                    "masked_row_softmax: row {} has no unmasked entries",
                    r % n
                )));
            }
            let mut sum = T::zero();
            for j in 0..n {
                if mrow[j] > T::zero() {
                    let v = (erow[j] - mx).exp();
                    orow[j] = v;
                    sum = sum + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        if self.validate {
            for r in 0..rows {
                let mut s = T::zero();
                for j in 0..n {
                    s = s + out[r * n + j];
                }
                if (s - T::one()).abs().to_f64() > 1e-6 {
                    return Err(Error::Numeric(format!(
                        "attention row {r} sums to {s} instead of 1"
                    )));
                }
            }
        }
        let out = Tensor::new(es.clone(), out)?;
        let alpha = out.clone();
        self.push(
            out,
            vec![e],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let ad = alpha.data();
                let mut de = vec![T::zero(); rows * n];
                for r in 0..rows {
                    let arow = &ad[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let s = dot(arow, grow);
                    let drow = &mut de[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] = arow[j] * (grow[j] - s);
                    }
                }
                vec![Some(Tensor::new(es.clone(), de).expect("de shape"))]
            })),
        )
    }

    // ----- reductions and reshaping -----

    /// Mean over the last axis: `[..., k] -> [...]`.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let k = *xs
            .last()
            .ok_or_else(|| Error::Shape("mean_last: rank-0 input".into()))?;
        if k == 0 {
            return Err(Error::Shape("mean_last: empty last axis".into()));
        }
        let rows = self.value(x).numel() / k;
        let kf = T::from_f64(k as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let mut s = T::zero();
            for v in &xd[r * k..(r + 1) * k] {
                s = s + *v;
            }
            out[r] = s / kf;
        }
        let os: Vec<usize> = if xs.len() == 1 {
            vec![1]
        } else {
            xs[..xs.len() - 1].to_vec()
        };
        let out = Tensor::new(os, out)?;
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * k];
                for r in 0..rows {
                    let gv = gd[r] / kf;
                    for d in &mut dx[r * k..(r + 1) * k] {
                        *d = gv;
                    }
                }
                vec![Some(Tensor::new(xs.clone(), dx).expect("dx shape"))]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let mut s = T::zero();
        for v in self.value(x).data() {
            s = s + *v;
        }
        self.push(
            Tensor::scalar(s),
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                let gv = g.data()[0];
                vec![Some(Tensor::full(xs.clone(), gv))]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    /// Dot product with a constant coefficient tensor, producing a scalar.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &Tensor<T>) -> Result<Var> {
        if !self.value(x).same_shape(coeffs) {
            return Err(Error::Shape("weighted_sum: coefficient shape mismatch".into()));
        }
        let s = dot(self.value(x).data(), coeffs.data());
        let c = coeffs.clone();
        self.push(
            Tensor::scalar(s),
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                let gv = g.data()[0];
                vec![Some(c.map(|v| v * gv))]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let out = self.value(x).reshaped(shape)?;
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g: &Tensor<T>| {
                vec![Some(g.reshaped(xs.clone()).expect("reshape grad"))]
            })),
        )
    }

    // ----- loss -----

    /// Binary focal cross-entropy, averaged over the batch.
    ///
    /// `mean_i -[alpha*y*(1-p)^gamma*log p + (1-alpha)*(1-y)*p^gamma*log(1-p)]`
    /// with probabilities clipped to `[1e-7, 1-1e-7]`.
    pub fn focal_bce(&mut self, p: Var, labels: &[T], gamma: f64, alpha: f64) -> Result<Var> {
        let b = self.value(p).numel();
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "focal_bce: {b} probabilities but {} labels",
                labels.len()
            )));
        }
        for y in labels {
            if *y != T::zero() && *y != T::one() {
                return Err(Error::Invalid(format!("focal_bce: label {y} outside {{0,1}}")));
            }
        }
        let lo = T::from_f64(1e-7);
        let hi = T::one() - lo;
        let ga = T::from_f64(gamma);
        let al = T::from_f64(alpha);
        let bf = T::from_f64(b as f64);
        let pd = self.value(p).clone();
        let ys = labels.to_vec();
        let mut total = T::zero();
        for (i, &pv) in pd.data().iter().enumerate() {
            let pc = clamp(pv, lo, hi);
            let li = if ys[i] == T::one() {
                -al * (T::one() - pc).powf(ga) * pc.ln()
            } else {
                -(T::one() - al) * pc.powf(ga) * (T::one() - pc).ln()
            };
            total = total + li;
        }
        let value = Tensor::scalar(total / bf);
        let ps = pd.shape().to_vec();
        self.push(
            value,
            vec![p],
            Some(Box::new(move |g: &Tensor<T>| {
                let gv = g.data()[0] / bf;
                let mut dp = vec![T::zero(); pd.numel()];
                for (i, &pv) in pd.data().iter().enumerate() {
                    if pv <= lo || pv >= hi {
                        continue; // clipped region: zero gradient
                    }
                    let d = if ys[i] == T::one() {
                        let q = T::one() - pv;
                        let focus = if gamma == 0.0 {
                            T::zero()
                        } else {
                            ga * q.powf(ga - T::one()) * pv.ln()
                        };
                        al * (focus - q.powf(ga) / pv)
                    } else {
                        let focus = if gamma == 0.0 {
                            T::zero()
                        } else {
                            ga * pv.powf(ga - T::one()) * (T::one() - pv).ln()
                        };
                        (T::one() - al) * (pv.powf(ga) / (T::one() - pv) - focus)
                    };
                    dp[i] = gv * d;
                }
                vec![Some(Tensor::new(ps.clone(), dp).expect("dp shape"))]
            })),
        )
    }

    /// Affine layer: `x @ w + b` with `b` broadcast along the last axis.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let axis = self.value(y).shape().len() - 1;
        self.add_bias(y, b, axis)
    }
}

/// Reverse sweep from a scalar `root`, retaining gradients for every node.
pub fn backward<T: Real>(tape: &Tape<T>, root: Var) -> Result<Gradients<T>> {
    backward_impl(tape, root, true)
}

/// Reverse sweep that discards intermediate gradients as soon as they have
/// been propagated, keeping only leaf gradients. Use for training.
pub fn backward_leaves<T: Real>(tape: &Tape<T>, root: Var) -> Result<Gradients<T>> {
    backward_impl(tape, root, false)
}

fn backward_impl<T: Real>(tape: &Tape<T>, root: Var, retain: bool) -> Result<Gradients<T>> {
    let root_val = tape.value(root);
    if root_val.numel() != 1 {
        return Err(Error::Invalid(format!(
            "backward: root must be scalar, got shape {:?}",
            root_val.shape()
        )));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; tape.nodes.len()];
    grads[root.0] = Some(Tensor::ones(root_val.shape().to_vec()));
    for id in (0..=root.0).rev() {
        let node = &tape.nodes[id];
        if !node.requires_grad && node.grad_fn.is_some() {
            grads[id] = None;
            continue;
        }
        let Some(grad_fn) = &node.grad_fn else {
            continue; // leaf: keep accumulated gradient
        };
        let Some(g) = grads[id].as_ref() else {
            continue; // not on any path from the root
        };
        let parent_grads = grad_fn(g);
        debug_assert_eq!(parent_grads.len(), node.parents.len());
        for (p, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !tape.nodes[p.0].requires_grad {
                continue;
            }
            debug_assert_eq!(pg.shape(), tape.nodes[p.0].value.shape());
            match &mut grads[p.0] {
                slot @ None => *slot = Some(pg),
                Some(acc) => *acc = zip_map(acc, &pg, |a, b| a + b),
            }
        }
        if !retain {
            grads[id] = None;
        }
    }
    Ok(Gradients { grads })
}

/// Per-node gradients produced by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

// ----- element helpers -----

fn clamp<T: Real>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + c * *s;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s = s + *x * *y;
    }
    s
}

/// `dst[t] += c * src[t + shift]` over the index range valid for both.
#[inline]
fn axpy_shifted<T: Real>(dst: &mut [T], src: &[T], c: T, shift: isize) {
    let t = dst.len() as isize;
    let lo = 0.max(-shift) as usize;
    let hi = t.min(src.len() as isize - shift).max(0) as usize;
    if hi > lo {
        axpy(
            &mut dst[lo..hi],
            &src[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
            c,
        );
    }
}

/// `sum_t a[t] * b[t + shift]` over the index range valid for both.
#[inline]
fn dot_shifted<T: Real>(a: &[T], b: &[T], shift: isize) -> T {
    let t = a.len() as isize;
    let lo = 0.max(-shift) as usize;
    let hi = t.min(b.len() as isize - shift).max(0) as usize;
    if hi > lo {
        dot(
            &a[lo..hi],
            &b[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
        )
    } else {
        T::zero()
    }
}

/// `out[r, m] = sum_k a[r, k] * b[k, m]` (row-major, `out` pre-zeroed).
fn mat_mul<T: Real>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
    for r in 0..rows {
        let orow = &mut out[r * m..(r + 1) * m];
        for kk in 0..k {
            axpy(orow, &b[kk * m..(kk + 1) * m], a[r * k + kk]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]));
        let w = tape.param(t64(vec![1, 1, 1], vec![1.0]));
        let y = tape.conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv1d_same_padding_matches_hand_rolled() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![1, 1, 4], vec![1.0; 4]));
        let w = tape.param(t64(vec![1, 1, 3], vec![1.0, 1.0, 1.0]));
        let y = tape.conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![1, 1, 4], vec![1.0; 4]));
        let w = tape.param(t64(vec![1, 1, 2], vec![1.0, 1.0]));
        assert!(matches!(tape.conv1d(x, w), Err(Error::Invalid(_))));
    }

    #[test]
    fn avg_pool_means_disjoint_pairs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![1, 4], vec![2.0, 4.0, 6.0, 8.0]));
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn avg_pool_rejects_odd_length() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![3], vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.avg_pool2(x), Err(Error::Shape(_))));
    }

    #[test]
    fn avg_pool_constant_input_stays_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(vec![384], 2.5));
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).numel(), 192);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn activation_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(x).unwrap();
        assert!((tape.value(s).data()[1] - 0.5).abs() < 1e-12);
        let e = tape.elu(x, 1.0).unwrap();
        assert!((tape.value(e).data()[0] - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
        assert!((tape.value(e).data()[0] + 0.632_120_558_8).abs() < 1e-9);
        let l = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn dense_identity_and_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.param(t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b0 = tape.param(t64(vec![2], vec![0.0, 0.0]));
        let y = tape.dense(x, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
        let b = tape.param(t64(vec![2], vec![3.0, 4.0]));
        let y2 = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y2).data(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![3], vec![1.0, -2.0, 3.0]));
        let loss = tape.sum_all(x).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_elementwise_square_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![3], vec![1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(vec![2], vec![1.0, 2.0]));
        assert!(matches!(backward(&tape, x), Err(Error::Invalid(_))));
    }

    #[test]
    fn batch_norm_train_normalizes_per_feature() {
        let mut tape = Tape::<f64>::new();
        let n = 4;
        let t = 8;
        let data: Vec<f64> = (0..n * 2 * t).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let x = tape.input(t64(vec![n, 2, t], data));
        let gamma = tape.param(Tensor::ones(vec![2]));
        let beta = tape.param(Tensor::zeros(vec![2]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let yd = tape.value(y).data();
        for c in 0..2 {
            let mut vals = vec![];
            for ni in 0..n {
                vals.extend_from_slice(&yd[(ni * 2 + c) * t..(ni * 2 + c + 1) * t]);
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "variance {v}");
        }
        assert_eq!(stats.mean.numel(), 2);
    }

    #[test]
    fn batch_norm_gamma_zero_yields_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![2, 1, 3], vec![5.0, -1.0, 2.0, 0.5, 3.0, 9.0]));
        let gamma = tape.param(Tensor::zeros(vec![1]));
        let beta = tape.param(Tensor::full(vec![1], 7.0));
        let (y, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(vec![0, 2, 4]));
        let gamma = tape.param(Tensor::ones(vec![2]));
        let beta = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.batch_norm_train(x, gamma, beta, 1e-5),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        let mut tape = Tape::<f64>::new();
        // Per-feature zero mean, unit variance (population).
        let x = tape.input(t64(vec![2, 1, 2], vec![1.0, -1.0, 1.0, -1.0]));
        let gamma = tape.param(Tensor::ones(vec![1]));
        let beta = tape.param(Tensor::zeros(vec![1]));
        let (y, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_eval_and_p_zero_are_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t64(vec![4], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(y, x); // p=0 returns the same node untouched
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_drop_fraction_near_p() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new().with_validation(false);
        let n = 100_000;
        let x = tape.input(Tensor::ones(vec![n]));
        let y = tape.dropout(x, 0.2, &mut rng).unwrap();
        let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.01, "drop fraction {frac}");
        // Survivors are scaled by 1/(1-p).
        let kept = tape.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.25).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_singleton_row_is_one() {
        let mut tape = Tape::<f64>::new();
        let e = tape.input(t64(vec![2, 2], vec![3.0, -1.0, 0.0, 5.0]));
        let mask = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = tape.masked_row_softmax(e, &mask).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn focal_bce_closed_forms() {
        // p=0.99, y=1: 0.4 * 0.01^2 * (-ln 0.99)
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t64(vec![1], vec![0.99]));
        let l = tape.focal_bce(p, &[1.0], 2.0, 0.4).unwrap();
        let expect = 0.4 * 0.01f64.powi(2) * -(0.99f64.ln());
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-12);
        assert!((tape.value(l).data()[0] - 4.02e-7).abs() < 1e-9);

        // p=0.5, y=1: 0.4 * 0.25 * ln 2
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t64(vec![1], vec![0.5]));
        let l = tape.focal_bce(p, &[1.0], 2.0, 0.4).unwrap();
        assert!((tape.value(l).data()[0] - 0.4 * 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((tape.value(l).data()[0] - 0.0693).abs() < 1e-4);
    }

    #[test]
    fn focal_bce_gamma_zero_reduces_to_half_bce() {
        let ps = [0.1, 0.35, 0.8, 0.97];
        let ys = [1.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t64(vec![4], ps.to_vec()));
        let l = tape.focal_bce(p, &ys, 0.0, 0.5).unwrap();
        let bce: f64 = ps
            .iter()
            .zip(ys)
            .map(|(&p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((tape.value(l).data()[0] - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_bce_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let p = tape.input(t64(vec![1], vec![0.5]));
        assert!(matches!(
            tape.focal_bce(p, &[0.5], 2.0, 0.4),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn validation_catches_nan() {
        let mut tape = Tape::<f64>::new().with_validation(true);
        let x = tape.input(t64(vec![1], vec![-1.0]));
        let l = tape.input(t64(vec![1], vec![0.0]));
        // ln of a negative number via focal on p slightly below zero is
        // prevented by clipping, so force a NaN through 0/0 instead.
        let z = tape.mul(x, l).unwrap();
        let _ = z;
        let bad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut tape2 = Tape::<f64>::new().with_validation(true);
        let a = tape2.input(bad);
        let b = tape2.input(t64(vec![1], vec![1.0]));
        assert!(matches!(tape2.add(a, b), Err(Error::Numeric(_))));
    }
}
