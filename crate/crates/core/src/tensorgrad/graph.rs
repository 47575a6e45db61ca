use rand::Rng;

use super::tensor::gemm;
use super::{ParamSet, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether parameters read into a graph receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    /// Parameters enter as constants; used for target networks and detached
    /// bootstrap values.
    Frozen,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise map with the local derivative cached at forward time.
    Unary(Var, Vec<f64>),
    /// Normalized output is stored as the node value; per-row 1/σ kept here.
    LayerNorm(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SquaredError(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SquaredError(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::LayerNorm(x, _)
            | Op::Dropout(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x) => vec![*x],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tag: Option<&'static str>,
}

/// Define-by-run tape. Build one per optimization step, call
/// [`Graph::backward`] once, then drop it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients with respect to the loss passed to `backward`, for every node
/// that depends on a trainable parameter.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tag: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Constant input carrying a label, so tests can audit where data on the
    /// tape came from.
    pub fn tagged_input(&mut self, tag: &'static str, value: Tensor) -> Var {
        let v = self.input(value);
        self.nodes[v.0].tag = Some(tag);
        v
    }

    /// Values of every input that was registered with `tag`.
    pub fn tagged(&self, tag: &str) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter(|n| n.tag == Some(tag))
            .map(|n| &n.value)
            .collect()
    }

    pub fn param(
        &mut self,
        params: &ParamSet,
        path: &str,
        binding: Binding,
    ) -> Result<Var, TensorError> {
        let value = params.value(path)?.clone();
        Ok(match binding {
            Binding::Trainable => self.push(value, Op::Param(path.to_string())),
            Binding::Frozen => self.push(value, Op::Input),
        })
    }

    /// `[n×k] · [k×m] → [n×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (m as isize, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() || tx.shape().len() != 2 {
            return Err(mismatch(op, tx, tr));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, tr.data()[i % c]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// Adds a length-`m` vector to every row of an `[n×m]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let value = self.row_broadcast("add_row", x, bias, |a, b| a + b)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Multiplies every row of an `[n×m]` matrix by a length-`m` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let value = self.row_broadcast("mul_row", x, gain, |a, b| a * b)?;
        Ok(self.push(value, Op::MulRow(x, gain)))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    /// Elementwise `f`, where `f` returns `(value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let tx = self.value(x);
        let (vals, derivs): (Vec<f64>, Vec<f64>) = tx.data().iter().map(|&v| f(v)).unzip();
        let value = Tensor::new(tx.shape().to_vec(), vals).expect("same shape");
        self.push(value, Op::Unary(x, derivs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn mish(&mut self, x: Var) -> Var {
        self.map(x, mish)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| (v.abs(), if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| (v * v, 2.0 * v))
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (n, d) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::LayerNorm(x, inv_std))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)` at train time,
    /// eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidDropout(rate));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyConcat)?);
        let n = first.rows();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(mismatch("concat", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(n, total, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `[n×m] → [n×1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.rows();
        let data = (0..n).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::matrix(n, 1, data).expect("n×1"), Op::RowSum(x))
    }

    /// Mean of squared differences.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("squared_error", ta, tb));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(s), Op::SquaredError(a, b)))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are accumulated
    /// into `params`; the tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<Grads, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;

        // only nodes downstream of a trainable parameter need a gradient
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Input => false,
                Op::Param(_) => true,
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
            if let Some(g) = grads[v.0].as_mut() {
                f(g);
            }
        }
        let ensure = |grads: &mut [Option<Vec<f64>>], v: Var, len: usize| {
            if needs[v.0] && grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; len]);
            }
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(path) => {
                    let p = params.get_mut(path)?;
                    let pg = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
                    for (a, b) in pg.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = dC · Bᵀ
                    ensure(&mut grads, *a, n * k);
                    acc(&mut grads, *a, |ga| {
                        gemm(n, m, k, &g, (m as isize, 1), tb.data(), (1, m as isize), 1.0, ga)
                    });
                    // dB = Aᵀ · dC
                    ensure(&mut grads, *b, k * m);
                    acc(&mut grads, *b, |gb| {
                        gemm(k, n, m, ta.data(), (1, k as isize), &g, (m as isize, 1), 1.0, gb)
                    });
                }
                Op::AddRow(x, b) => {
                    let c = self.nodes[b.0].value.len();
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| add_assign(gx, &g));
                    ensure(&mut grads, *b, c);
                    acc(&mut grads, *b, |gb| {
                        for (j, v) in g.iter().enumerate() {
                            gb[j % c] += v;
                        }
                    });
                }
                Op::MulRow(x, w) => {
                    let tx = &self.nodes[x.0].value;
                    let tw = &self.nodes[w.0].value;
                    let c = tw.len();
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| {
                        for (j, v) in g.iter().enumerate() {
                            gx[j] += v * tw.data()[j % c];
                        }
                    });
                    ensure(&mut grads, *w, c);
                    acc(&mut grads, *w, |gw| {
                        for (j, v) in g.iter().enumerate() {
                            gw[j % c] += v * tx.data()[j];
                        }
                    });
                }
                Op::Add(a, b) => {
                    ensure(&mut grads, *a, g.len());
                    acc(&mut grads, *a, |ga| add_assign(ga, &g));
                    ensure(&mut grads, *b, g.len());
                    acc(&mut grads, *b, |gb| add_assign(gb, &g));
                }
                Op::Sub(a, b) => {
                    ensure(&mut grads, *a, g.len());
                    acc(&mut grads, *a, |ga| add_assign(ga, &g));
                    ensure(&mut grads, *b, g.len());
                    acc(&mut grads, *b, |gb| {
                        for (x, v) in gb.iter_mut().zip(&g) {
                            *x -= v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    ensure(&mut grads, *a, g.len());
                    acc(&mut grads, *a, |ga| {
                        for ((x, v), w) in ga.iter_mut().zip(&g).zip(tb.data()) {
                            *x += v * w;
                        }
                    });
                    ensure(&mut grads, *b, g.len());
                    acc(&mut grads, *b, |gb| {
                        for ((x, v), w) in gb.iter_mut().zip(&g).zip(ta.data()) {
                            *x += v * w;
                        }
                    });
                }
                Op::Scale(x, k) => {
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| {
                        for (a, v) in gx.iter_mut().zip(&g) {
                            *a += k * v;
                        }
                    });
                }
                Op::Unary(x, d) => {
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| {
                        for ((a, v), dv) in gx.iter_mut().zip(&g).zip(d) {
                            *a += v * dv;
                        }
                    });
                }
                Op::LayerNorm(x, inv_std) => {
                    let y = &node.value;
                    let d = y.cols();
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| {
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let yr = y.row(r);
                            let mean_g = gr.iter().sum::<f64>() / d as f64;
                            let mean_gy =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                            }
                        }
                    });
                }
                Op::Dropout(x, mask) => {
                    ensure(&mut grads, *x, g.len());
                    acc(&mut grads, *x, |gx| {
                        for ((a, v), m) in gx.iter_mut().zip(&g).zip(mask) {
                            *a += v * m;
                        }
                    });
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let n = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        ensure(&mut grads, *p, n * w);
                        acc(&mut grads, *p, |gp| {
                            for r in 0..n {
                                for j in 0..w {
                                    gp[r * w + j] += g[r * total + offset + j];
                                }
                            }
                        });
                        offset += w;
                    }
                }
                Op::Sum(x) => {
                    let len = self.nodes[x.0].value.len();
                    ensure(&mut grads, *x, len);
                    acc(&mut grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
                }
                Op::Mean(x) => {
                    let len = self.nodes[x.0].value.len();
                    let s = g[0] / len.max(1) as f64;
                    ensure(&mut grads, *x, len);
                    acc(&mut grads, *x, |gx| gx.iter_mut().for_each(|a| *a += s));
                }
                Op::RowSum(x) => {
                    let tx = &self.nodes[x.0].value;
                    let c = tx.cols();
                    ensure(&mut grads, *x, tx.len());
                    acc(&mut grads, *x, |gx| {
                        for (j, a) in gx.iter_mut().enumerate() {
                            *a += g[j / c];
                        }
                    });
                }
                Op::SquaredError(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let s = 2.0 * g[0] / ta.len().max(1) as f64;
                    let diff: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, y)| s * (x - y))
                        .collect();
                    ensure(&mut grads, *a, diff.len());
                    acc(&mut grads, *a, |ga| add_assign(ga, &diff));
                    ensure(&mut grads, *b, diff.len());
                    acc(&mut grads, *b, |gb| {
                        for (x, v) in gb.iter_mut().zip(&diff) {
                            *x -= v;
                        }
                    });
                }
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Grads { grads })
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// `x·tanh(softplus(x))` and its derivative.
pub fn mish(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (x, 1.0);
    }
    // with e = exp(x), tanh(ln(1 + e)) = n / (n + 2) where n = e(e + 2)
    let e = x.exp();
    let n = e * (e + 2.0);
    let t = n / (n + 2.0);
    let sech2 = 4.0 * (n + 1.0) / ((n + 2.0) * (n + 2.0));
    (x * t, t + x * sech2 * e / (1.0 + e))
}

/// Tanh approximation of GELU and its derivative.
pub fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    (
        0.5 * x * (1.0 + t),
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mish_matches_the_direct_formula() {
        for i in -400..=400 {
            let x = i as f64 * 0.1;
            let t = x.exp().ln_1p().tanh();
            let (v, _) = mish(x);
            assert!((v - x * t).abs() <= 1e-12 * (1.0 + x.abs()), "x={x}");
        }
    }
}
