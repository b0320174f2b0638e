//! Dense row-major tensors.
//!
//! Only what the encoder graph needs: matrix products (plain and with a
//! transposed operand), elementwise arithmetic, row softmax and the GELU
//! nonlinearity. No broadcasting beyond adding a bias row.

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d >= 1),
            Dimension,
            "shape entries must be >= 1, got {:?}",
            shape
        );
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Dimension,
            "shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value], requires_grad: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Dimension, "no rows");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Dimension,
            "ragged rows"
        );
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { shape: vec![rows, cols], data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[..self.shape.len() - 1].iter().product(), *self.shape.last().unwrap()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(n == self.data.len(), Dimension, "cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "{}: shapes {:?} and {:?} differ",
            op,
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure!(
            self.shape == other.shape,
            Dimension,
            "add_assign: shapes {:?} and {:?} differ",
            self.shape,
            other.shape
        );
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (r, c) = self.dims2();
        ensure!(bias.len() == c, Dimension, "bias of length {} for {} columns", bias.len(), c);
        let mut out = self.clone();
        out.requires_grad = false;
        for i in 0..r {
            for (o, &b) in out.data[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims2();
        Tensor::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    pub fn sum(&self) -> T {
        crate::scalar::ordered_sum(&self.data)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        ensure!(k == k2, Dimension, "matmul inner dims {}x{} · {}x{}", m, k, k2, n);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        ensure!(k == k2, Dimension, "matmul_nt inner dims {}x{} · ({}x{})ᵀ", m, k, n, k2);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = crate::scalar::dot(a, &other.data[j * k..(j + 1) * k]);
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2();
        let (k2, n) = other.dims2();
        ensure!(k == k2, Dimension, "matmul_tn inner dims ({}x{})ᵀ · {}x{}", k, m, k2, n);
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let a = &self.data[p * m..(p + 1) * m];
            let b = &other.data[p * n..(p + 1) * n];
            for (i, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut out[i * n..(i + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov = *ov + av * bv;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2();
        let mut out = self.clone();
        out.requires_grad = false;
        for i in 0..r {
            softmax_in_place(&mut out.data[i * c..(i + 1) * c])?;
        }
        Ok(out)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), Dimension, "concat of nothing");
        let r = parts[0].rows();
        ensure!(parts.iter().all(|p| p.rows() == r), Dimension, "concat row mismatch");
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::matrix(r, total, data)
    }

    /// Copy of the value with every entry rounded through `f32`.
    pub fn round_f32(&self) -> Self {
        let mut t = self.map(Scalar::round_f32);
        t.requires_grad = self.requires_grad;
        t
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// `out += a(m×k) · b(k×n)`, i-k-j order so the inner loop is contiguous.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov = *ov + av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(xs: &mut [T]) -> Result<()> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::Numeric("NaN in softmax input".into()));
    }
    let max = xs.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
    Ok(())
}

/// Softmax of a `1×n` row.
pub fn softmax_row<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(x.rows() == 1, Dimension, "softmax_row expects 1×n, got {:?}", x.shape());
    x.softmax_rows()
}

const GELU_COEF: f64 = 0.044_715;

fn sqrt_2_over_pi<T: Scalar>() -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt())
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = sqrt_2_over_pi::<T>() * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    let k = sqrt_2_over_pi::<T>();
    let c = T::lit(GELU_COEF);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * sech2 * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            s
        })
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i = Tensor::<f64>::identity(2);
        let b = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let nt = a.matmul_nt(&b.transpose()).unwrap();
        let tn = a.transpose().matmul_tn(&b).unwrap();
        for ((x, y), z) in got.data().iter().zip(nt.data()).zip(tn.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            assert_abs_diff_eq!(x, z, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_row(&Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_row(&Tensor::from_rows(&[vec![1000.0f64; 3]]).unwrap()).unwrap();
        for &x in s.data() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        // reference values from exp(k)/(e + e^2 + e^3) in 50-digit arithmetic
        let s = softmax_row(&Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0]]).unwrap()).unwrap();
        let want = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (x, y) in s.data().iter().zip(want) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
        let nan = Tensor::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(softmax_row(&nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_derivative(x), fd, epsilon = 1e-8);
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_permutation_equivariant(
                xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
                rot in 0usize..12,
            ) {
                let n = xs.len();
                let t = Tensor::matrix(1, n, xs.clone()).unwrap();
                let s = softmax_row(&t).unwrap();
                prop_assert!((s.sum() - 1.0).abs() < 1e-12);
                prop_assert!(s.data().iter().all(|&x| x >= 0.0));
                let k = rot % n;
                let mut rotated = xs.clone();
                rotated.rotate_left(k);
                let sr = softmax_row(&Tensor::matrix(1, n, rotated).unwrap()).unwrap();
                let mut expect = s.data().to_vec();
                expect.rotate_left(k);
                for (a, b) in sr.data().iter().zip(&expect) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }

            #[test]
            fn matmul_associative_against_naive(
                m in 1usize..16, k in 1usize..16, n in 1usize..16, p in 1usize..16, seed in any::<u64>()
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(&mut rng, m, k);
                let b = random(&mut rng, k, n);
                let c = random(&mut rng, n, p);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = naive_matmul(&a, &naive_matmul(&b, &c));
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }
}
