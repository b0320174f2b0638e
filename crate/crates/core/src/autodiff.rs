//! Reverse-mode differentiation over a recorded tape of matrix primitives.
//!
//! The encoder graph is static, so the tape only knows the handful of
//! operations that graph uses. Nodes are appended in evaluation order, which
//! is already a topological order; `backward` walks them once in reverse.

use crate::error::{ensure, Error, Result};
use crate::scalar::{dot, norm, Scalar};
use crate::tensor::{gelu_derivative, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// a + bias row broadcast over rows
    AddRow(Var, Var),
    Mul(Var, Var),
    SoftmaxRows(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    RowSum(Var),
    Sum(Var),
    Scale(Var, T),
    CombinedLoss { pred: Var, target: Vec<T>, alpha: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. It is differentiated iff `value.requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let g = value.requires_grad;
        self.push(value, Op::Leaf, g)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_grad())
    }

    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), g))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNt(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        let g = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(a, bias), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        let g = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), g))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let g = self.needs(a);
        self.push(out, Op::Gelu(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), g))
    }

    /// `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let rows: Vec<T> = (0..v.rows()).map(|i| crate::scalar::ordered_sum(v.row(i))).collect();
        let out = Tensor::matrix(rows.len(), 1, rows).expect("n×1");
        let g = self.needs(a);
        self.push(out, Op::RowSum(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(out, Op::Sum(a), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let g = self.needs(a);
        self.push(out, Op::Scale(a, s), g)
    }

    /// Records `alpha·MSE(pred, target) − (1−alpha)·cos(pred, target)`.
    pub fn combined_loss(&mut self, pred: Var, target: &[T], alpha: T) -> Result<Var> {
        let p = self.value(pred);
        ensure!(
            p.len() == target.len(),
            Dimension,
            "loss: {} predictions vs {} targets",
            p.len(),
            target.len()
        );
        let value = crate::train::loss::combined_loss(p.data(), target, alpha)?;
        let g = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CombinedLoss { pred, target: target.to_vec(), alpha },
            g,
        ))
    }

    /// Gradient of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    // out = a·bᵀ: da = g·b, db = gᵀ·a
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let c = g.cols();
                        let mut gb = vec![T::zero(); c];
                        for i in 0..g.rows() {
                            for (s, &x) in gb.iter_mut().zip(g.row(i)) {
                                *s = *s + x;
                            }
                        }
                        let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb)?;
                        accumulate(&mut grads, *bias, gb)?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.mul(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.mul(self.value(*a))?)?;
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dx = s ⊙ (g − ⟨g, s⟩) per row
                    let s = &node.value;
                    let c = s.cols();
                    let mut gx = g.clone();
                    for i in 0..s.rows() {
                        let sr = s.row(i);
                        let inner = dot(g.row(i), sr);
                        for (j, out) in gx.row_mut(i).iter_mut().enumerate().take(c) {
                            *out = sr[j] * (*out - inner);
                        }
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        *gv = *gv * gelu_derivative(xv);
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        if self.needs(p) {
                            let gp = Tensor::from_fn(g.rows(), pc, |i, j| g.get(i, offset + j));
                            accumulate(&mut grads, p, gp)?;
                        }
                        offset += pc;
                    }
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let gx = Tensor::from_fn(x.rows(), x.cols(), |i, _| g.data()[i]);
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Sum(a) => {
                    let gx = Tensor::full(self.value(*a).shape(), g.data()[0]);
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s))?;
                }
                Op::CombinedLoss { pred, target, alpha } => {
                    let p = self.value(*pred);
                    let dp = combined_loss_grad(p.data(), target, *alpha);
                    let scale = g.data()[0];
                    let dp: Vec<T> = dp.into_iter().map(|x| x * scale).collect();
                    let gp = Tensor::new(p.shape().to_vec(), dp)?;
                    accumulate(&mut grads, *pred, gp)?;
                }
            }
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Analytic gradient of the combined loss with respect to the predictions.
pub(crate) fn combined_loss_grad<T: Scalar>(pred: &[T], target: &[T], alpha: T) -> Vec<T> {
    let n = T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let np = norm(pred);
    let nt = norm(target);
    let cos_active = np > T::zero() && nt > T::zero();
    let cos = if cos_active { dot(pred, target) / (np * nt) } else { T::zero() };
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let dmse = two * (p - t) / n;
            let dcos = if cos_active { t / (np * nt) - cos * p / (np * np) } else { T::zero() };
            alpha * dmse - (T::one() - alpha) * dcos
        })
        .collect()
}

/// Maximum relative error between `analytic` gradients and central
/// differences of `f` at `params`:
/// `|a − c| / (|a| + |c| + 1e-12)`.
pub fn finite_difference_check<T: Scalar>(
    f: impl Fn(&[T]) -> T,
    params: &[T],
    analytic: &[T],
    step: T,
) -> Result<T> {
    ensure!(step > T::zero(), Contract, "finite-difference step must be positive");
    ensure!(
        params.len() == analytic.len(),
        Dimension,
        "{} params vs {} gradient entries",
        params.len(),
        analytic.len()
    );
    let f0 = f(params);
    let f1 = f(params);
    if f0 != f1 && !(f0.is_nan() && f1.is_nan()) {
        return Err(Error::Contract(format!(
            "objective is not deterministic: {} vs {}",
            f0, f1
        )));
    }
    let mut x = params.to_vec();
    let mut worst = T::zero();
    let two = T::lit(2.0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let central = (up - down) / (two * step);
        let a = analytic[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + T::lit(1e-12));
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
