use super::{check_finite, dot_norms, gemm, leaky_relu, sigmoid, softplus, Real, TensorOf, MIN_NORM};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowCosine(Var, Var),
    RowL1(Var, Var),
}

struct Node<T> {
    op: Op,
    value: TensorOf<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Node inputs always precede
/// the node, so a reverse sweep is a valid topological order.
pub struct TapeOf<T> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for TapeOf<T> {
    fn default() -> Self {
        TapeOf { nodes: Vec::new() }
    }
}

/// Gradient slots indexed by node id. Every node that depends on a
/// parameter leaf gets a slot; unused parameters get zeros.
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<TensorOf<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&TensorOf<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    /// Gradient of a parameter leaf. Panics if `v` was not a parameter.
    pub fn wrt(&self, v: Var) -> &TensorOf<T> {
        self.get(v).expect("no gradient slot: variable is not a parameter")
    }

    pub fn take(&mut self, v: Var) -> TensorOf<T> {
        self.slots[v.0]
            .take()
            .expect("no gradient slot: variable is not a parameter")
    }
}

impl<T: Real> TapeOf<T> {
    pub fn new() -> Self {
        TapeOf::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: TensorOf<T>) -> Var {
        self.push_raw(Op::Param, t, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: TensorOf<T>) -> Var {
        self.push_raw(Op::Const, t, false)
    }

    pub fn value(&self, v: Var) -> &TensorOf<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, op: Op, value: TensorOf<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: TensorOf<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, value, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let out = TensorOf::matrix(m, n, data)?;
        self.push(Op::MatMul(a, b), out, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out, &[a, b], "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), out, &[a], "neg")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        self.push(Op::Exp(a), out, &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::DomainError { op: "log" });
        }
        let out = self.value(a).map(T::ln);
        self.push(Op::Log(a), out, &[a], "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::abs);
        self.push(Op::Abs(a), out, &[a], "abs")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, c), out, &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let out = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a), out, &[a], "add_scalar")
    }

    /// `x[r×c] + bias[c]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_bias")?;
        let b = self.value(bias);
        if b.len() != c || b.rank() != 1 {
            return Err(Error::shape("add_bias", self.value(x).shape(), b.shape()));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for i in 0..r {
            for (o, bv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bd) {
                *o = *o + *bv;
            }
        }
        self.push(Op::AddBias(x, bias), out, &[x, bias], "add_bias")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(super::relu);
        self.push(Op::Relu(a), out, &[a], "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        let out = self.value(a).map(|x| leaky_relu(x, s));
        self.push(Op::LeakyRelu(a, slope), out, &[a], "leaky_relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out, &[a], "softplus")
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", self.value(a).shape(), self.value(b).shape()));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = TensorOf::matrix(ra, ca + cb, data)?;
        self.push(Op::ConcatCols(a, b), out, &[a, b], "concat_cols")
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", self.value(a).shape(), &[start, len]));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = TensorOf::matrix(r, len, data)?;
        self.push(Op::SliceCols(a, start), out, &[a], "slice_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = super::reduce(super::ReduceKind::Sum, self.value(a).data())?;
        self.push(Op::Sum(a), TensorOf::scalar(s), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = super::reduce(super::ReduceKind::Mean, self.value(a).data())?;
        self.push(Op::Mean(a), TensorOf::scalar(s), &[a], "mean")
    }

    /// Per-row sums of a matrix, giving a vector of length `rows`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix_dims(a, "sum_rows")?;
        let t = self.value(a);
        let data = (0..r)
            .map(|i| T::of(t.row(i).iter().map(|v| v.f64()).sum::<f64>()))
            .collect();
        let out = TensorOf::from_vec(data)?;
        self.push(Op::SumRows(a), out, &[a], "sum_rows")
    }

    /// Cosine similarity of corresponding rows. Any row with norm below
    /// 1e-12 is a `ZeroVector` error.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_cosine")?;
        let (r, _) = self.matrix_dims(a, "row_cosine")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let (dot, na, nb) = dot_norms(ta.row(i), tb.row(i));
            if na < MIN_NORM {
                return Err(Error::ZeroVector {
                    side: format!("left (row {i})"),
                });
            }
            if nb < MIN_NORM {
                return Err(Error::ZeroVector {
                    side: format!("right (row {i})"),
                });
            }
            data.push(T::of(dot / (na * nb)));
        }
        let out = TensorOf::from_vec(data)?;
        self.push(Op::RowCosine(a, b), out, &[a, b], "row_cosine")
    }

    /// Manhattan distance between corresponding rows.
    pub fn row_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_l1")?;
        let (r, _) = self.matrix_dims(a, "row_l1")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = (0..r)
            .map(|i| super::l1_dist(ta.row(i), tb.row(i)))
            .collect::<Result<Vec<_>>>()?;
        let out = TensorOf::from_vec(data)?;
        self.push(Op::RowL1(a, b), out, &[a, b], "row_l1")
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<TensorOf<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            slots[loss.0] = Some(TensorOf::full(lv.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = slots.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.propagate(&node.op, &node.value, g, lo);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && slots[i].is_none() {
                slots[i] = Some(TensorOf::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { slots })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &TensorOf<T>,
        g: &TensorOf<T>,
        slots: &mut [Option<TensorOf<T>>],
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: TensorOf<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut slots[v.0] {
                Some(s) => s.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match *op {
            Op::Param | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let ga = gemm(g.data(), val(b).data(), m, n, k, false, true);
                    acc(a, TensorOf::matrix(m, k, ga).unwrap());
                }
                if self.nodes[b.0].requires_grad {
                    let gb = gemm(val(a).data(), g.data(), k, m, n, true, false);
                    acc(b, TensorOf::matrix(k, n, gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(a, g.zip(val(b), |x, y| x * y));
                acc(b, g.zip(val(a), |x, y| x * y));
            }
            Op::Neg(a) => acc(a, g.map(|x| -x)),
            Op::Exp(a) => acc(a, g.zip(out, |x, y| x * y)),
            Op::Log(a) => acc(a, g.zip(val(a), |x, y| x / y)),
            Op::Abs(a) => acc(a, g.zip(val(a), |x, y| x * sign(y))),
            Op::Scale(a, c) => acc(a, g.map(|x| x * T::of(c))),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::AddBias(x, b) => {
                let (r, c) = (g.rows(), g.cols());
                let mut gb = vec![0.0f64; c];
                for i in 0..r {
                    for (s, v) in gb.iter_mut().zip(g.row(i)) {
                        *s += v.f64();
                    }
                }
                acc(b, TensorOf::from_vec(gb.into_iter().map(T::of).collect()).unwrap());
                acc(x, g.clone());
            }
            Op::Relu(a) => acc(a, g.zip(val(a), |x, y| if y > T::zero() { x } else { T::zero() })),
            Op::LeakyRelu(a, s) => {
                let s = T::of(s);
                acc(a, g.zip(val(a), |x, y| if y >= T::zero() { x } else { s * x }))
            }
            Op::Softplus(a) => acc(a, g.zip(val(a), |x, y| x * sigmoid(y))),
            Op::ConcatCols(a, b) => {
                let (r, ca, cb) = (g.rows(), val(a).cols(), val(b).cols());
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                acc(a, TensorOf::matrix(r, ca, ga).unwrap());
                acc(b, TensorOf::matrix(r, cb, gb).unwrap());
            }
            Op::SliceCols(a, start) => {
                let src = val(a);
                let (r, c, len) = (src.rows(), src.cols(), g.cols());
                let mut ga = TensorOf::zeros(src.shape());
                for i in 0..r {
                    ga.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                acc(a, ga);
            }
            Op::Sum(a) => acc(a, TensorOf::full(val(a).shape(), g.item())),
            Op::Mean(a) => {
                let n = T::of(val(a).len() as f64);
                acc(a, TensorOf::full(val(a).shape(), g.item() / n));
            }
            Op::SumRows(a) => {
                let src = val(a);
                let c = src.cols();
                let mut ga = TensorOf::zeros(src.shape());
                for (i, gi) in g.data().iter().enumerate() {
                    ga.data_mut()[i * c..(i + 1) * c].fill(*gi);
                }
                acc(a, ga);
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let c = ta.cols();
                let mut ga = TensorOf::zeros(ta.shape());
                let mut gb = TensorOf::zeros(tb.shape());
                for (i, &gi) in g.data().iter().enumerate() {
                    let (ra, rb) = (ta.row(i), tb.row(i));
                    let (dot, na, nb) = dot_norms(ra, rb);
                    let cos = dot / (na * nb);
                    let gi = gi.f64();
                    for j in 0..c {
                        let (x, y) = (ra[j].f64(), rb[j].f64());
                        ga.data_mut()[i * c + j] = T::of(gi * (y / (na * nb) - cos * x / (na * na)));
                        gb.data_mut()[i * c + j] = T::of(gi * (x / (na * nb) - cos * y / (nb * nb)));
                    }
                }
                acc(a, ga);
                acc(b, gb);
            }
            Op::RowL1(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let c = ta.cols();
                let mut ga = TensorOf::zeros(ta.shape());
                for (i, &gi) in g.data().iter().enumerate() {
                    for j in 0..c {
                        let k = i * c + j;
                        ga.data_mut()[k] = gi * sign(ta.data()[k] - tb.data()[k]);
                    }
                }
                acc(b, ga.map(|x| -x));
                acc(a, ga);
            }
        }
    }
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
