use rand::Rng;
use super::{sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `[n×m] + [1×m]`, bias broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    /// Elementwise `softplus(z) − t z`.
    BceLogits(Var, Tensor),
    /// Elementwise `(x − y)²`.
    SquaredError(Var, Tensor),
    /// Per-row `Σ_v c_v ln p_v`, giving `[n×1]`.
    CountLogLik(Var, Tensor),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    /// Elementwise map with a caller-supplied derivative.
    Map(Var, fn(f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match self {
            Leaf => [None, None],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => [Some(*a), Some(*b)],
            Scale(x, _) | Offset(x) | Square(x) | Exp(x) | Log(x) | Relu(x) | Softplus(x)
            | Sigmoid(x) | ClampMin(x, _) | SoftmaxRows(x) | BceLogits(x, _)
            | SquaredError(x, _) | CountLogLik(x, _) | Sum(x) | Mean(x) | SumCols(x)
            | Map(x, _) => [Some(*x), None],
        }
    }
}

/// A dynamically built computation graph.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node
/// list is a valid topological order for the backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Which side of each piecewise-linear kink (relu, clamp) every input
    /// landed on. Used by gradient checking to exclude crossings.
    kinks: Vec<bool>,
}

/// Gradients of a scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.grads[v.0], Tensor::zeros(0, 0))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().flatten().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf excluded from differentiation; its gradient stays zero.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.rows(), av.cols(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Invalid(format!("log of nonpositive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.kinks.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.kinks.extend(self.nodes[x.0].value.data().iter().map(|&v| v > floor));
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Elementwise binary cross-entropy of `targets` against `logits`, in the
    /// fused form `softplus(z) − t z`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Invalid(format!(
                "cross-entropy target {t} outside {{0,1}}"
            )));
        }
        let data = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| super::bce_with_logit(z, t))
            .collect();
        let value = Tensor::new(lv.rows(), lv.cols(), data)?;
        Ok(self.push(value, Op::BceLogits(logits, targets)))
    }

    pub fn squared_error(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "squared_error",
                format!("{:?} vs {:?}", pv.shape(), target.shape()),
            ));
        }
        let data = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| (p - y) * (p - y))
            .collect();
        let value = Tensor::new(pv.rows(), pv.cols(), data)?;
        Ok(self.push(value, Op::SquaredError(pred, target)))
    }

    /// Per-row count-weighted log-likelihood `Σ_v c_v ln p_v` of categorical
    /// probabilities `probs` (`[n×V]`). Zero counts contribute nothing even
    /// where the probability is zero.
    pub fn count_loglik(&mut self, probs: Var, counts: Tensor) -> Result<Var> {
        let pv = self.value(probs);
        if pv.shape() != counts.shape() {
            return Err(Error::shape(
                "count_loglik",
                format!("{:?} vs {:?}", pv.shape(), counts.shape()),
            ));
        }
        let cols = pv.cols();
        let mut out = Vec::with_capacity(pv.rows());
        for r in 0..pv.rows() {
            let mut acc = 0.0;
            for (v, (&c, &p)) in counts.row(r).iter().zip(pv.row(r)).enumerate() {
                if c == 0.0 {
                    continue;
                }
                if p <= 0.0 {
                    return Err(Error::ZeroProbabilityToken(v % cols));
                }
                acc += c * p.ln();
            }
            out.push(acc);
        }
        let value = Tensor::column_vector(out);
        Ok(self.push(value, Op::CountLogLik(probs, counts)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Sum across columns: `[n×m] → [n×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::column_vector((0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect());
        self.push(value, Op::SumCols(x))
    }

    /// Elementwise `f(x)` whose backward rule multiplies by `df(x)`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, f, Op::Map(x, df))
    }

    /// Reparameterized Gaussian draw `mu + sigma ⊙ ε`, `ε ~ N(0, I)` from `rng`.
    pub fn reparam_sample<R: Rng + ?Sized>(&mut self, mu: Var, sigma: Var, rng: &mut R) -> Result<Var> {
        self.same_shape("reparam_sample", mu, sigma)?;
        let sv = self.value(sigma);
        if let Some(s) = sv.data().iter().find(|&&s| s <= 0.0 || s.is_nan()) {
            return Err(Error::Invalid(format!("nonpositive sigma {s}")));
        }
        let eps = Tensor::randn(sv.rows(), sv.cols(), 1.0, rng);
        self.reparam_with_noise(mu, sigma, eps)
    }

    /// As [`Graph::reparam_sample`] with the standard-normal noise supplied.
    pub fn reparam_with_noise(&mut self, mu: Var, sigma: Var, eps: Tensor) -> Result<Var> {
        let eps = self.constant(eps);
        let scaled = self.mul(sigma, eps)?;
        self.add(mu, scaled)
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[output.0].data_mut()[0] = 1.0;

        for i in (0..=output.0).rev() {
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(0, 0));
            if !self.nodes[i].needs_grad || g.data().iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs_grad(*a) {
                        let ga = g.matmul(&bv.transpose())?;
                        grads[a.0].add_assign(&ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = av.transpose().matmul(&g)?;
                        grads[b.0].add_assign(&gb);
                    }
                }
                Op::AddBias(x, b) => {
                    grads[x.0].add_assign(&g);
                    let cols = g.cols();
                    let gb = grads[b.0].data_mut();
                    for (k, v) in g.data().iter().enumerate() {
                        gb[k % cols] += v;
                    }
                }
                Op::Add(a, b) => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_assign(&g);
                    let gb = grads[b.0].data_mut();
                    for (d, v) in gb.iter_mut().zip(g.data()) {
                        *d -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    for (k, gv) in g.data().iter().enumerate() {
                        grads[a.0].data_mut()[k] += gv * bv[k];
                        grads[b.0].data_mut()[k] += gv * av[k];
                    }
                }
                Op::Scale(x, c) => self.accumulate(&mut grads, *x, &g, |_, _| *c),
                Op::Offset(x) => grads[x.0].add_assign(&g),
                Op::Square(x) => self.accumulate(&mut grads, *x, &g, |xv, _| 2.0 * xv),
                Op::Exp(x) => self.accumulate_with_output(&mut grads, *x, &g, y, |_, yv| yv),
                Op::Log(x) => self.accumulate(&mut grads, *x, &g, |xv, _| 1.0 / xv),
                Op::Relu(x) => {
                    self.accumulate(&mut grads, *x, &g, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
                }
                Op::Softplus(x) => self.accumulate(&mut grads, *x, &g, |xv, _| sigmoid(xv)),
                Op::Sigmoid(x) => {
                    self.accumulate_with_output(&mut grads, *x, &g, y, |_, yv| yv * (1.0 - yv))
                }
                Op::ClampMin(x, floor) => self.accumulate(&mut grads, *x, &g, |xv, _| {
                    if xv > *floor {
                        1.0
                    } else {
                        0.0
                    }
                }),
                Op::SoftmaxRows(x) => {
                    let gx = grads[x.0].data_mut();
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::BceLogits(z, t) => {
                    let zv = self.value(*z).data();
                    let gz = grads[z.0].data_mut();
                    for k in 0..zv.len() {
                        gz[k] += g.data()[k] * (sigmoid(zv[k]) - t.data()[k]);
                    }
                }
                Op::SquaredError(p, target) => {
                    let pv = self.value(*p).data();
                    let gp = grads[p.0].data_mut();
                    for k in 0..pv.len() {
                        gp[k] += g.data()[k] * 2.0 * (pv[k] - target.data()[k]);
                    }
                }
                Op::CountLogLik(p, counts) => {
                    let pv = self.value(*p);
                    let cols = pv.cols();
                    let gp = grads[p.0].data_mut();
                    for r in 0..pv.rows() {
                        let gr = g.data()[r];
                        for c in 0..cols {
                            let k = r * cols + c;
                            let cnt = counts.data()[k];
                            if cnt != 0.0 {
                                gp[k] += gr * cnt / pv.data()[k];
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item();
                    for d in grads[x.0].data_mut() {
                        *d += gv;
                    }
                }
                Op::Mean(x) => {
                    let gx = grads[x.0].data_mut();
                    let gv = g.item() / gx.len() as f64;
                    for d in gx {
                        *d += gv;
                    }
                }
                Op::SumCols(x) => {
                    let gx = grads[x.0].data_mut();
                    let cols = self.value(*x).cols();
                    for (k, d) in gx.iter_mut().enumerate() {
                        *d += g.data()[k / cols];
                    }
                }
                Op::Map(x, df) => self.accumulate(&mut grads, *x, &g, |xv, _| df(xv)),
            }
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Tensor], x: Var, g: &Tensor, d: impl Fn(f64, f64) -> f64) {
        let xv = self.value(x).data();
        let gx = grads[x.0].data_mut();
        for (k, gv) in g.data().iter().enumerate() {
            gx[k] += gv * d(xv[k], 0.0);
        }
    }

    fn accumulate_with_output(
        &self,
        grads: &mut [Tensor],
        x: Var,
        g: &Tensor,
        y: &Tensor,
        d: impl Fn(f64, f64) -> f64,
    ) {
        let xv = self.value(x).data();
        let gx = grads[x.0].data_mut();
        for (k, gv) in g.data().iter().enumerate() {
            gx[k] += gv * d(xv[k], y.data()[k]);
        }
    }
}
