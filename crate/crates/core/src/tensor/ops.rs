use std::rc::Rc;

use super::backward::GradMap;
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Sqrt,
    Recip,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 9] = [
        UnaryOp::Neg,
        UnaryOp::Tanh,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Abs,
        UnaryOp::Sqrt,
        UnaryOp::Recip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Recip => "recip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Componentwise maximum; ties go to the left operand.
    Max2,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Max2];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Max2 => "max2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// Which operand, if any, is a row vector broadcast over the other's rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    None,
    Lhs,
    Rhs,
}

pub(crate) type Derivative<T> = Rc<dyn Fn(T) -> T>;

pub(crate) enum Op<T: Scalar> {
    Matmul(Tensor<T>, Tensor<T>),
    MatmulNt(Tensor<T>, Tensor<T>),
    Binary(BinaryOp, Tensor<T>, Tensor<T>, Broadcast),
    Unary(UnaryOp, Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Concat(Tensor<T>, Tensor<T>),
    Reduce(ReduceOp, Tensor<T>, Option<usize>),
    BceLogits(Tensor<T>, Tensor<T>),
    Map(Tensor<T>, Derivative<T>),
    /// loc, rho, noise.
    LaplaceReparam(Tensor<T>, Tensor<T>, Vec<T>),
    /// loc, rho, softplus(rho), prior loc, prior scale.
    LaplaceKl(Tensor<T>, Tensor<T>, Vec<T>, T, T),
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn broadcast_layout(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::None)
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Some(Broadcast::Rhs)
    } else if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Scalar> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Matmul(a, b)
            | Op::MatmulNt(a, b)
            | Op::Binary(_, a, b, _)
            | Op::Concat(a, b)
            | Op::BceLogits(a, b)
            | Op::LaplaceReparam(a, b, _)
            | Op::LaplaceKl(a, b, _, _, _) => vec![a, b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reduce(_, a, _)
            | Op::Map(a, _) => vec![a],
        }
    }

    /// Accumulates this op's input gradients given the output gradient `g`.
    pub(crate) fn backward(&self, out: &Tensor<T>, g: &[T], grads: &mut GradMap<T>) {
        match self {
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (k_, n_) = (k as isize, n as isize);
                if let Some(ga) = grads.slot(a) {
                    // grad_a = g · bᵀ
                    T::gemm(m, n, k, g, (n_, 1), &b.data(), (1, n_), T::one(), ga);
                }
                if let Some(gb) = grads.slot(b) {
                    // grad_b = aᵀ · g
                    T::gemm(k, m, n, &a.data(), (1, k_), g, (n_, 1), T::one(), gb);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let (k_, n_) = (k as isize, n as isize);
                if let Some(ga) = grads.slot(a) {
                    // grad_a = g · b
                    T::gemm(m, n, k, g, (n_, 1), &b.data(), (k_, 1), T::one(), ga);
                }
                if let Some(gb) = grads.slot(b) {
                    // grad_b = gᵀ · a
                    T::gemm(n, m, k, g, (1, n_), &a.data(), (k_, 1), T::one(), gb);
                }
            }
            Op::Binary(op, a, b, layout) => binary_backward(*op, a, b, *layout, g, grads),
            Op::Unary(op, x) => {
                if let Some(gx) = grads.slot(x) {
                    let xd = x.data();
                    let yd = out.data();
                    for i in 0..gx.len() {
                        let (xv, yv) = (xd[i], yd[i]);
                        let d = match op {
                            UnaryOp::Neg => -T::one(),
                            UnaryOp::Tanh => T::one() - yv * yv,
                            UnaryOp::Sigmoid => yv * (T::one() - yv),
                            UnaryOp::Softplus => sigmoid(xv),
                            UnaryOp::Exp => yv,
                            UnaryOp::Log => T::one() / xv,
                            // Subgradient 0 at the kink.
                            UnaryOp::Abs => sign(xv),
                            UnaryOp::Sqrt => T::lit(0.5) / yv,
                            UnaryOp::Recip => -yv * yv,
                        };
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = grads.slot(x) {
                    gx.iter_mut().zip(g).for_each(|(acc, gv)| *acc += *gv * *c);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = grads.slot(x) {
                    gx.iter_mut().zip(g).for_each(|(acc, gv)| *acc += *gv);
                }
            }
            Op::Concat(a, b) => {
                let p = *a.shape().last().unwrap();
                let q = *b.shape().last().unwrap();
                let rows = a.numel() / p;
                if let Some(ga) = grads.slot(a) {
                    for r in 0..rows {
                        let src = &g[r * (p + q)..r * (p + q) + p];
                        ga[r * p..(r + 1) * p]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(acc, gv)| *acc += *gv);
                    }
                }
                if let Some(gb) = grads.slot(b) {
                    for r in 0..rows {
                        let src = &g[r * (p + q) + p..(r + 1) * (p + q)];
                        gb[r * q..(r + 1) * q]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(acc, gv)| *acc += *gv);
                    }
                }
            }
            Op::Reduce(op, x, axis) => {
                if let Some(gx) = grads.slot(x) {
                    match axis {
                        None => {
                            let scale = match op {
                                ReduceOp::Sum => T::one(),
                                ReduceOp::Mean => T::one() / T::lit(gx.len() as f64),
                            };
                            let gv = g[0] * scale;
                            gx.iter_mut().for_each(|acc| *acc += gv);
                        }
                        Some(ax) => {
                            let (outer, extent, inner) = split_axis(x.shape(), *ax);
                            let scale = match op {
                                ReduceOp::Sum => T::one(),
                                ReduceOp::Mean => T::one() / T::lit(extent as f64),
                            };
                            for o in 0..outer {
                                for e in 0..extent {
                                    let base = (o * extent + e) * inner;
                                    for i in 0..inner {
                                        gx[base + i] += g[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BceLogits(logits, targets) => {
                if let Some(gl) = grads.slot(logits) {
                    let l = logits.data();
                    let y = targets.data();
                    for i in 0..gl.len() {
                        gl[i] += g[i] * (sigmoid(l[i]) - y[i]);
                    }
                }
            }
            Op::Map(x, deriv) => {
                if let Some(gx) = grads.slot(x) {
                    let xd = x.data();
                    for i in 0..gx.len() {
                        gx[i] += g[i] * deriv(xd[i]);
                    }
                }
            }
            Op::LaplaceReparam(loc, rho, noise) => {
                if let Some(gl) = grads.slot(loc) {
                    gl.iter_mut().zip(g).for_each(|(acc, gv)| *acc += *gv);
                }
                if let Some(gr) = grads.slot(rho) {
                    let rd = rho.data();
                    for i in 0..gr.len() {
                        gr[i] += g[i] * noise[i] * sigmoid(rd[i]);
                    }
                }
            }
            Op::LaplaceKl(loc, rho, scale, mp, bp) => {
                let ld = loc.data();
                let inv_bp = T::one() / *bp;
                let tails: Vec<(T, T)> = (0..scale.len())
                    .map(|i| {
                        let z = (ld[i] - *mp).abs() / scale[i];
                        (z, (-z).exp())
                    })
                    .collect();
                if let Some(gl) = grads.slot(loc) {
                    for i in 0..gl.len() {
                        gl[i] += g[0] * sign(ld[i] - *mp) * inv_bp * (T::one() - tails[i].1);
                    }
                }
                if let Some(gr) = grads.slot(rho) {
                    let rd = rho.data();
                    for i in 0..gr.len() {
                        let (z, e) = tails[i];
                        let db = e * (T::one() + z) * inv_bp - T::one() / scale[i];
                        gr[i] += g[0] * db * sigmoid(rd[i]);
                    }
                }
            }
        }
    }
}

fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    layout: Broadcast,
    g: &[T],
    grads: &mut GradMap<T>,
) {
    let ad = a.data();
    let bd = b.data();
    let (na, nb) = (ad.len(), bd.len());
    let ia = |i: usize| if layout == Broadcast::Lhs { i % na } else { i };
    let ib = |i: usize| if layout == Broadcast::Rhs { i % nb } else { i };
    if let Some(ga) = grads.slot(a) {
        for (i, gv) in g.iter().enumerate() {
            let (x, y) = (ad[ia(i)], bd[ib(i)]);
            ga[ia(i)] += match op {
                BinaryOp::Add | BinaryOp::Sub => *gv,
                BinaryOp::Mul => *gv * y,
                BinaryOp::Max2 => {
                    if x >= y {
                        *gv
                    } else {
                        T::zero()
                    }
                }
            };
        }
    }
    if let Some(gb) = grads.slot(b) {
        for (i, gv) in g.iter().enumerate() {
            let (x, y) = (ad[ia(i)], bd[ib(i)]);
            gb[ib(i)] += match op {
                BinaryOp::Add => *gv,
                BinaryOp::Sub => -*gv,
                BinaryOp::Mul => *gv * x,
                BinaryOp::Max2 => {
                    if x >= y {
                        T::zero()
                    } else {
                        *gv
                    }
                }
            };
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data(),
            (k as isize, 1),
            &other.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        Ok(Tensor::from_op(out, vec![m, n], Op::Matmul(self.clone(), other.clone())))
    }

    /// `self[m×k] · other[n×k]ᵀ`, the layout of a linear layer's weight.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data(),
            (k as isize, 1),
            &other.data(),
            (1, k as isize),
            T::zero(),
            &mut out,
        );
        Ok(Tensor::from_op(out, vec![m, n], Op::MatmulNt(self.clone(), other.clone())))
    }

    /// Elementwise binary op. Shapes must match, or one side may be a
    /// length-n vector broadcast across the rows of an m×n matrix.
    pub fn binary(&self, op: BinaryOp, other: &Tensor<T>) -> Result<Tensor<T>> {
        let layout = broadcast_layout(self.shape(), other.shape())
            .ok_or_else(|| Error::dim(op.name(), self.shape(), other.shape()))?;
        let shape = match layout {
            Broadcast::Lhs => other.shape().to_vec(),
            _ => self.shape().to_vec(),
        };
        let out = {
            let ad = self.data();
            let bd = other.data();
            let (na, nb) = (ad.len(), bd.len());
            let f = |x: T, y: T| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Max2 => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            };
            match layout {
                Broadcast::None => ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Rhs => (0..na).map(|i| f(ad[i], bd[i % nb])).collect(),
                Broadcast::Lhs => (0..nb).map(|i| f(ad[i % na], bd[i])).collect(),
            }
        };
        Ok(Tensor::from_op(
            out,
            shape,
            Op::Binary(op, self.clone(), other.clone(), layout),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn max2(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Max2, other)
    }

    /// Elementwise unary op. `log`, `sqrt` and `recip` reject inputs outside
    /// their domain.
    pub fn unary(&self, op: UnaryOp) -> Result<Tensor<T>> {
        let out: Vec<T> = {
            let xd = self.data();
            match op {
                UnaryOp::Log if xd.iter().any(|&v| v <= T::zero()) => {
                    return Err(Error::domain("log of a nonpositive value"));
                }
                UnaryOp::Sqrt if xd.iter().any(|&v| v < T::zero()) => {
                    return Err(Error::domain("sqrt of a negative value"));
                }
                UnaryOp::Recip if xd.iter().any(|&v| v == T::zero()) => {
                    return Err(Error::domain("reciprocal of zero"));
                }
                _ => {}
            }
            xd.iter()
                .map(|&x| match op {
                    UnaryOp::Neg => -x,
                    UnaryOp::Tanh => x.tanh(),
                    UnaryOp::Sigmoid => sigmoid(x),
                    UnaryOp::Softplus => softplus(x),
                    UnaryOp::Exp => x.exp(),
                    UnaryOp::Log => x.ln(),
                    UnaryOp::Abs => x.abs(),
                    UnaryOp::Sqrt => x.sqrt(),
                    UnaryOp::Recip => x.recip(),
                })
                .collect()
        };
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Unary(op, self.clone())))
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(UnaryOp::Neg).expect("neg is total")
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(UnaryOp::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(UnaryOp::Sigmoid).expect("sigmoid is total")
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary(UnaryOp::Softplus).expect("softplus is total")
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(UnaryOp::Exp).expect("exp is total")
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(UnaryOp::Abs).expect("abs is total")
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Log)
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn recip(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Recip)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: T) -> Tensor<T> {
        self.neg().add_scalar(c)
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat_last", sa, sb));
        }
        let p = *sa.last().unwrap();
        let q = *sb.last().unwrap();
        let rows = self.numel() / p;
        let mut out = Vec::with_capacity(rows * (p + q));
        {
            let ad = self.data();
            let bd = other.data();
            for r in 0..rows {
                out.extend_from_slice(&ad[r * p..(r + 1) * p]);
                out.extend_from_slice(&bd[r * q..(r + 1) * q]);
            }
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        Ok(Tensor::from_op(out, shape, Op::Concat(self.clone(), other.clone())))
    }

    /// Sum or mean over `axis`, or over everything (yielding a scalar).
    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Tensor<T>> {
        let xd = self.data();
        let (out, shape) = match axis {
            None => {
                // Accumulate in f64: full reductions run over entire weight
                // tensors when summing KL terms.
                let s: f64 = xd.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / xd.len() as f64,
                };
                (vec![T::lit(v)], Vec::new())
            }
            Some(ax) => {
                if ax >= self.rank() {
                    return Err(Error::dim("reduce", self.shape(), &[ax]));
                }
                let (outer, extent, inner) = split_axis(self.shape(), ax);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xd[base + i];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let inv = T::one() / T::lit(extent as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
                let mut shape = self.shape().to_vec();
                shape.remove(ax);
                (out, shape)
            }
        };
        drop(xd);
        Ok(Tensor::from_op(out, shape, Op::Reduce(op, self.clone(), axis)))
    }

    pub fn sum(&self) -> Tensor<T> {
        self.reduce(ReduceOp::Sum, None).expect("full reduction is total")
    }

    pub fn mean(&self) -> Tensor<T> {
        self.reduce(ReduceOp::Mean, None).expect("full reduction is total")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, Some(axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, Some(axis))
    }

    /// Elementwise binary cross-entropy on logits in the stable form
    /// `max(l,0) − l·y + ln(1 + e^{−|l|})`. Targets must be 0 or 1.
    pub fn bce_with_logits_elementwise(&self, targets: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", self.shape(), targets.shape()));
        }
        let out = {
            let l = self.data();
            let y = targets.data();
            if y.iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(Error::contract("bce targets must be 0 or 1"));
            }
            l.iter()
                .zip(y.iter())
                .map(|(&l, &y)| l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p())
                .collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::BceLogits(self.clone(), targets.clone()),
        ))
    }

    /// Applies `f` elementwise with a caller-supplied derivative `df`.
    pub fn map_elementwise(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Tensor<T> {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Map(self.clone(), Rc::new(df)))
    }
}

impl<T: Scalar> Tensor<T> {
    /// `self + softplus(rho) ⊙ noise` with `noise` held constant.
    pub fn laplace_reparam(&self, rho: &Tensor<T>, noise: Vec<T>) -> Result<Tensor<T>> {
        if rho.shape() != self.shape() || noise.len() != self.numel() {
            return Err(Error::dim("laplace_reparam", self.shape(), rho.shape()));
        }
        let out = {
            let (ld, rd) = (self.data(), rho.data());
            (0..noise.len()).map(|i| ld[i] + softplus(rd[i]) * noise[i]).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LaplaceReparam(self.clone(), rho.clone(), noise),
        ))
    }

    /// `Σᵢ KL(Laplace(selfᵢ, softplus(rhoᵢ)) ‖ Laplace(prior_loc, prior_scale))`.
    /// The `|·|` kink at `selfᵢ = prior_loc` gets subgradient 0.
    pub fn laplace_kl_sum(&self, rho: &Tensor<T>, prior_loc: T, prior_scale: T) -> Result<Tensor<T>> {
        if rho.shape() != self.shape() {
            return Err(Error::dim("laplace_kl_sum", self.shape(), rho.shape()));
        }
        if !(prior_scale > T::zero()) {
            return Err(Error::domain("prior scale must be positive"));
        }
        let scale: Vec<T> = rho.data().iter().map(|&r| softplus(r)).collect();
        if scale.iter().any(|&b| !(b > T::zero())) {
            return Err(Error::domain("posterior scale underflowed to zero"));
        }
        let total = {
            let ld = self.data();
            let (inv_bp, log_bp) = (T::one() / prior_scale, prior_scale.ln());
            let mut acc = T::zero();
            for (&l, &b) in ld.iter().zip(&scale) {
                let d = (l - prior_loc).abs();
                acc += log_bp - b.ln() + d * inv_bp + b * inv_bp * (-d / b).exp() - T::one();
            }
            acc
        };
        Ok(Tensor::from_op(
            vec![total],
            Vec::new(),
            Op::LaplaceKl(self.clone(), rho.clone(), scale, prior_loc, prior_scale),
        ))
    }
}
