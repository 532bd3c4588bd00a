//! Dense row-major tensors with a small reverse-mode autodiff tape.
//!
//! Model values live in 32-bit precision ([`Tensor`], [`Tape`]). Matrix
//! products and reductions accumulate in 64-bit and round once on the way
//! out. The same engine instantiated at `f64` ([`Tensor64`], [`Tape64`])
//! backs the tighter gradient checks.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_mixed, GradCheckReport, Objective};
pub use tape::{Gradients, TapeOf, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::Debug;

/// Element type of a tensor: `f32` or `f64`.
pub trait Real: num_traits::Float + Debug + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

pub type Tensor = TensorOf<f32>;
pub type Tensor64 = TensorOf<f64>;
pub type Tape = TapeOf<f32>;
pub type Tape64 = TapeOf<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> TensorOf<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::EmptyTensor);
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(TensorOf { shape, data })
    }

    /// 1-D tensor. Fails with `EmptyTensor` on an empty vector.
    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        TensorOf::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        TensorOf::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        TensorOf::new(vec![rows.len(), cols], data)
    }

    pub fn scalar(v: T) -> Self {
        TensorOf {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        TensorOf::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dimensions must be positive: {shape:?}"
        );
        TensorOf {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// I.i.d. `Normal(0, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = TensorOf::zeros(shape);
        if std > 0.0 {
            for v in &mut t.data {
                let e: f64 = StandardNormal.sample(rng);
                *v = T::of(e * std);
            }
        }
        t
    }

    pub fn identity(n: usize) -> Self {
        let mut t = TensorOf::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Element-type conversion (rounds when narrowing).
    pub fn cast<U: Real>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count, treating a 1-D tensor as a single row.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        TensorOf::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        TensorOf {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Abs,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Softplus,
}

pub fn relu<T: Real>(x: T) -> T {
    x.max(T::zero())
}

pub fn leaky_relu<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus<T: Real>(x: T) -> T {
    let x = x.f64();
    T::of(x.max(0.0) + (-x.abs()).exp().ln_1p())
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let x = x.f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::of(s)
}

pub(crate) fn check_finite<T: Real>(t: &TensorOf<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Matrix product `a[m×k] · b[k×n]`. 1-D operands are treated as a row
/// vector on the left and a column vector on the right.
pub fn matmul<T: Real>(a: &TensorOf<T>, b: &TensorOf<T>) -> Result<TensorOf<T>> {
    let (m, k) = as_matrix(a);
    let (k2, n) = if b.rank() == 1 {
        (b.len(), 1)
    } else {
        (b.shape[0], b.cols())
    };
    if a.rank() > 2 || b.rank() > 2 || k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let out = gemm(&a.data, &b.data, m, k, n, false, false);
    let shape = match (a.rank(), b.rank()) {
        (1, 1) => vec![1],
        (1, _) => vec![n],
        (_, 1) => vec![m],
        _ => vec![m, n],
    };
    let t = TensorOf { shape, data: out };
    check_finite(&t, "matmul")?;
    Ok(t)
}

fn as_matrix<T: Real>(t: &TensorOf<T>) -> (usize, usize) {
    if t.rank() == 1 {
        (1, t.len())
    } else {
        (t.shape[0], t.cols())
    }
}

/// `op(A)[m×k] · op(B)[k×n]` where `op` optionally transposes the stored
/// row-major operand. Accumulates in `f64`.
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let a64: Vec<f64> = a.iter().map(|v| v.f64()).collect();
    let b64: Vec<f64> = b.iter().map(|v| v.f64()).collect();
    let mut c = vec![0.0f64; m * n];
    // Stored A is m×k (or k×m when transposed); strides pick the view.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(a64.len() >= m * k && b64.len() >= k * n);
    // SAFETY: the buffers hold m*k, k*n and m*n elements and the strides
    // address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            rsa,
            csa,
            b64.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c.into_iter().map(T::of).collect()
}

/// Pointwise arithmetic. Binary kinds require equal shapes.
pub fn elementwise<T: Real>(
    kind: Elementwise,
    a: &TensorOf<T>,
    b: Option<&TensorOf<T>>,
) -> Result<TensorOf<T>> {
    let binary = |op: &'static str, f: fn(T, T) -> T| -> Result<TensorOf<T>> {
        let b = b.ok_or_else(|| Error::shape(op, a.shape(), &[]))?;
        if a.shape != b.shape {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok(a.zip(b, f))
    };
    let out = match kind {
        Elementwise::Add => binary("add", |x, y| x + y)?,
        Elementwise::Sub => binary("sub", |x, y| x - y)?,
        Elementwise::Mul => binary("mul", |x, y| x * y)?,
        Elementwise::Neg => a.map(|x| -x),
        Elementwise::Exp => a.map(T::exp),
        Elementwise::Log => {
            if a.data.iter().any(|&v| v <= T::zero()) {
                return Err(Error::DomainError { op: "log" });
            }
            a.map(T::ln)
        }
        Elementwise::Abs => a.map(T::abs),
        Elementwise::Scale(c) => a.map(|x| x * T::of(c)),
    };
    check_finite(&out, "elementwise")?;
    Ok(out)
}

pub fn activation<T: Real>(kind: Activation, x: &TensorOf<T>) -> TensorOf<T> {
    match kind {
        Activation::Relu => x.map(relu),
        Activation::LeakyRelu(s) => x.map(|v| leaky_relu(v, T::of(s))),
        Activation::Softplus => x.map(softplus),
    }
}

pub fn reduce<T: Real>(kind: ReduceKind, x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let s: f64 = x.iter().map(|v| v.f64()).sum();
    Ok(match kind {
        ReduceKind::Sum => T::of(s),
        ReduceKind::Mean => T::of(s / x.len() as f64),
    })
}

pub(crate) const MIN_NORM: f64 = 1e-12;

pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na < MIN_NORM {
        return Err(Error::ZeroVector { side: "left".into() });
    }
    if nb < MIN_NORM {
        return Err(Error::ZeroVector { side: "right".into() });
    }
    Ok(T::of(dot / (na * nb)))
}

pub(crate) fn dot_norms<T: Real>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

pub fn l1_dist<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("l1_dist", &[a.len()], &[b.len()]));
    }
    Ok(T::of(
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x.f64() - y.f64()).abs())
            .sum::<f64>(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f32> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a.data[i * k + p] as f64 * b.data[p * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_selector() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        let sel = Tensor::matrix(1, 2, vec![1., 0.]).unwrap();
        let col = Tensor::matrix(2, 1, vec![2., 5.]).unwrap();
        assert_eq!(matmul(&sel, &col).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn transposed_gemm_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        // aᵀ·b via strides vs explicit transpose
        let at: Vec<f32> = (0..5)
            .flat_map(|j| (0..3).map(move |i| (i, j)))
            .map(|(i, j)| a.data[i * 5 + j])
            .collect();
        let at = Tensor::matrix(5, 3, at).unwrap();
        let got = gemm(a.data(), b.data(), 5, 3, 2, true, false);
        assert_eq!(got, naive_matmul(&at, &b));
    }

    #[test]
    fn elementwise_examples() {
        let a = Tensor::from_vec(vec![1., 2.]).unwrap();
        let b = Tensor::from_vec(vec![3., 4.]).unwrap();
        assert_eq!(
            elementwise(Elementwise::Add, &a, Some(&b)).unwrap().data(),
            &[4., 6.]
        );
        let z = Tensor::zeros(&[2]);
        assert_eq!(
            elementwise(Elementwise::Exp, &z, None).unwrap().data(),
            &[1., 1.]
        );
        let m = Tensor::from_vec(vec![-2., 3.]).unwrap();
        assert_eq!(
            elementwise(Elementwise::Abs, &m, None).unwrap().data(),
            &[2., 3.]
        );
        assert!(matches!(
            elementwise(Elementwise::Log, &m, None),
            Err(Error::DomainError { .. })
        ));
        let c = Tensor::from_vec(vec![1., 2., 3.]).unwrap();
        assert!(matches!(
            elementwise(Elementwise::Add, &a, Some(&c)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let a = Tensor::from_vec(vec![1000.0]).unwrap();
        assert!(matches!(
            elementwise(Elementwise::Exp, &a, None),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn activation_examples() {
        let x = Tensor::from_vec(vec![-1., 2.]).unwrap();
        assert_eq!(activation(Activation::Relu, &x).data(), &[0., 2.]);
        assert_eq!(leaky_relu(-10.0f32, 0.2), -2.0);
        assert!((softplus(0.0f32) - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(softplus(1000.0f32), 1000.0);
        assert_eq!(softplus(-1000.0f32), 0.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3f32, 4.], &[3., 4.]).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(cosine_sim(&[1f32, 0.], &[0., 1.]).unwrap(), 0.0);
        let expected = 1.0 / 2f64.sqrt();
        assert!((cosine_sim(&[1f32, 1.], &[1., 0.]).unwrap() as f64 - expected).abs() < 1e-4);
        assert!(matches!(
            cosine_sim(&[0f32, 0.], &[1., 0.]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn l1_and_reduce_examples() {
        assert_eq!(l1_dist(&[1f32, 2.], &[1., 2.]).unwrap(), 0.0);
        assert_eq!(l1_dist(&[1f32, 2.], &[0., 0.]).unwrap(), 3.0);
        assert!(l1_dist(&[1f32], &[1., 2.]).is_err());
        assert_eq!(reduce(ReduceKind::Mean, &[2f32, 4.]).unwrap(), 3.0);
        assert!(matches!(reduce::<f32>(ReduceKind::Sum, &[]), Err(Error::EmptyTensor)));
        assert_eq!(reduce(ReduceKind::Mean, &[0.7f32; 9]).unwrap(), 0.7);
        assert!(matches!(Tensor::from_vec(vec![]), Err(Error::EmptyTensor)));
    }

    #[test]
    fn l1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Tensor::randn(&[7], 1.0, &mut rng);
            let b = Tensor::randn(&[7], 1.0, &mut rng);
            let mut acc = 0.0f64;
            for i in 0..7 {
                acc += (a.data[i] as f64 - b.data[i] as f64).abs();
            }
            assert_eq!(l1_dist(a.data(), b.data()).unwrap(), acc as f32);
        }
    }

    proptest! {
        #[test]
        fn softplus_identities(x in -50.0f32..50.0) {
            prop_assert!(softplus(x) >= x.max(0.0));
            prop_assert!((softplus(-x) - (softplus(x) - x)).abs() < 1e-5);
        }

        #[test]
        fn relu_nonneg_and_leaky_monotone(x in -10.0f32..10.0, d in 0.0f32..5.0) {
            prop_assert!(relu(x) >= 0.0);
            prop_assert!(leaky_relu(x + d, 0.2) >= leaky_relu(x, 0.2f32));
        }

        #[test]
        fn matmul_close_to_f64_oracle(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let got = matmul(&a, &b).unwrap();
            for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
                prop_assert!((g - e).abs() <= 1e-4 * e.abs().max(1.0));
            }
        }
    }
}
