//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass. It is
//! rebuilt for each mini-batch and dropped after [`Tape::backward`]. Values are
//! computed eagerly; the recorded op only keeps what its adjoint needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{self, Tensor, LOG_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x * w^T` where `w` is stored `[out x in]`.
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    ClampLn(Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A gradient barrier: a fresh leaf carrying the same value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(Error::dim("matmul_nt", xv.shape(), wv.shape()));
        }
        let value = tensor::matmul_nt(xv, wv);
        Ok(self.push(value, Op::MatMulNt(x, w)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        let m = xv.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % m];
        }
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    /// Training-mode batch normalisation over the rows of `x`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if n < 2 {
            return Err(Error::contract("batch norm in training mode needs at least two rows"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != m || bv.len() != m {
            return Err(Error::dim("batch_norm", xv.shape(), gv.shape()));
        }
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (mu, &v) in mean.iter_mut().zip(xv.row(i)) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= n as f64);
        let mut var = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let d = xv.get(i, j) - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / math::sqrt(s + eps)).collect();
        let mut xhat = Tensor::zeros(&[n, m]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let h = (xv.get(i, j) - mean[j]) * inv_std[j];
                xhat.data_mut()[i * m + j] = h;
                out.data_mut()[i * m + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let stats = BatchStats {
            mean,
            var,
            count: n,
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Weight-normalised matrix: row `k` is `g[k] * v[k] / |v[k]|`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, gv) = (self.value(v), self.value(g));
        let rows = vv.rows();
        if vv.shape().len() != 2 || gv.len() != rows {
            return Err(Error::dim("weight_norm", vv.shape(), gv.shape()));
        }
        let mut norms = Vec::with_capacity(rows);
        let mut out = vv.clone();
        for k in 0..rows {
            let norm = math::sqrt(vv.row(k).iter().map(|x| x * x).sum());
            if norm == 0.0 {
                return Err(Error::contract("weight-norm direction has zero length"));
            }
            let s = gv.data()[k] / norm;
            out.row_mut(k).iter_mut().for_each(|w| *w *= s);
            norms.push(norm);
        }
        Ok(self.push(out, Op::WeightNorm { v, g, norms }))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = tensor::softmax_rows(self.value(x));
        self.push(value, Op::Softmax(x))
    }

    /// Row-wise `z - logsumexp(z)`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for i in 0..xv.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&z| math::exp(z - max)).sum::<f64>());
            row.iter_mut().for_each(|z| *z -= lse);
        }
        self.push(value, Op::LogSoftmax(x))
    }

    /// `ln(max(x, LOG_EPS))` elementwise; the gradient is zero on the clamped branch.
    pub fn clamp_ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(tensor::clamped_ln);
        self.push(value, Op::ClampLn(x))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let value = self.value(a).zip_map(c, |x, y| x * y)?;
        Ok(self.push(value, Op::MulConst(a, c.clone())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Column means of an `n x m` matrix, as `1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::new(vec![1, m], out).expect("nonempty");
        self.push(value, Op::MeanRows(a))
    }

    /// Back-propagates from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Grads> {
        if self.value(output).len() != 1 {
            return Err(Error::contract("backward requires a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[idx] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_nt(&dy, self.value(*b));
                    let db = tensor::matmul_tn(self.value(*a), &dy);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNt(x, w) => {
                    let dx = tensor::matmul(&dy, self.value(*w))?;
                    let dw = tensor::matmul_tn(&dy, self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AddBias(x, b) => {
                    let m = dy.cols();
                    let mut db = vec![0.0; m];
                    for i in 0..dy.rows() {
                        for (d, &g) in db.iter_mut().zip(dy.row(i)) {
                            *d += g;
                        }
                    }
                    let db = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                    accumulate(&mut grads, *x, dy);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = dy.zip_map(xv, |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, m) = (dy.rows(), dy.cols());
                    let gv = self.value(*gamma);
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            let g = dy.get(i, j);
                            dbeta[j] += g;
                            dgamma[j] += g * xhat.get(i, j);
                        }
                    }
                    let nf = n as f64;
                    let mut dx = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        for j in 0..m {
                            let scale = gv.data()[j] * inv_std[j] / nf;
                            dx.data_mut()[i * m + j] = scale
                                * (nf * dy.get(i, j) - dbeta[j] - xhat.get(i, j) * dgamma[j]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    let shape = gv.shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::new(shape.clone(), dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(shape, dbeta)?);
                }
                Op::WeightNorm { v, g, norms } => {
                    let vv = self.value(*v);
                    let gv = self.value(*g);
                    let mut dv = Tensor::zeros(vv.shape());
                    let mut dg = vec![0.0; norms.len()];
                    for (k, &norm) in norms.iter().enumerate() {
                        let vrow = vv.row(k);
                        let drow = dy.row(k);
                        let proj: f64 = vrow.iter().zip(drow).map(|(a, b)| a * b).sum::<f64>() / norm;
                        dg[k] = proj;
                        let s = gv.data()[k] / norm;
                        for ((o, &d), &a) in dv.row_mut(k).iter_mut().zip(drow).zip(vrow) {
                            *o = s * (d - proj * a / norm);
                        }
                    }
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *g, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut dx = Tensor::zeros(p.shape());
                    for i in 0..p.rows() {
                        let prow = p.row(i);
                        let drow = dy.row(i);
                        let dot: f64 = prow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for ((o, &pi), &di) in dx.row_mut(i).iter_mut().zip(prow).zip(drow) {
                            *o = pi * (di - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax(x) => {
                    let lp = &node.value;
                    let mut dx = Tensor::zeros(lp.shape());
                    for i in 0..lp.rows() {
                        let drow = dy.row(i);
                        let total: f64 = drow.iter().sum();
                        for ((o, &l), &d) in dx.row_mut(i).iter_mut().zip(lp.row(i)).zip(drow) {
                            *o = d - math::exp(l) * total;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ClampLn(x) => {
                    let dx = dy.zip_map(self.value(*x), |g, v| if v > LOG_EPS { g / v } else { 0.0 })?;
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, v| g * v)?;
                    let db = dy.zip_map(self.value(*a), |g, v| g * v)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MulConst(a, c) => {
                    let da = dy.zip_map(c, |g, v| g * v)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, dy.map(|g| -g));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.value(*a).shape(), g));
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    let mut da = Tensor::zeros(av.shape());
                    for i in 0..av.rows() {
                        for (o, &g) in da.row_mut(i).iter_mut().zip(dy.data()) {
                            *o = g / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(g),
    }
}

/// Default central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error, so that components whose
/// true gradient is zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares tape gradients of a scalar function of several tensors against
/// central finite differences and returns the maximum relative error.
///
/// `f` must build its computation on the given tape from the supplied leaves
/// and return the scalar output node.
pub fn grad_check_many<F>(f: F, thetas: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = thetas.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = thetas.to_vec();
    for (t, theta) in thetas.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[t], theta);
        for i in 0..theta.len() {
            let orig = theta.data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), core::slice::from_ref(theta), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_gradient() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(theta.clone());
        let sq = tape.mul(v, v).unwrap();
        let out = tape.sum(sq);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &theta,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradient_shapes_match_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 3]);
        let w = random(&mut rng, &[3, 5]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let y = tape.matmul(xv, wv).unwrap();
        let out = tape.sum(y);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(xv).unwrap().shape(), x.shape());
        assert_eq!(g.get(wv).unwrap().shape(), w.shape());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[5, 3]);
            let w = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4]);
            let gamma = random(&mut rng, &[4]).map(|v| v + 1.5);
            let beta = random(&mut rng, &[4]);
            let v = random(&mut rng, &[3, 4]);
            let g = random(&mut rng, &[3]).map(|v| v + 1.5);
            let target = random(&mut rng, &[5, 3]).map(|v| v.abs());
            let err = grad_check_many(
                |t, p| {
                    let h = t.matmul(p[0], p[1])?;
                    let h = t.add_bias(h, p[2])?;
                    let (h, _) = t.batch_norm(h, p[3], p[4], 1e-5)?;
                    let h = t.relu(h);
                    let wn = t.weight_norm(p[5], p[6])?;
                    let z = t.matmul_nt(h, wn)?;
                    let s = t.softmax(z);
                    let l = t.clamp_ln(s);
                    let m = t.mean_rows(s);
                    let lm = t.clamp_ln(m);
                    let a = t.mul_const(l, &target)?;
                    let a = t.sum(a);
                    let c = t.mul(m, lm)?;
                    let c = t.sum(c);
                    let d = t.sub(a, c)?;
                    let ls = t.log_softmax(z);
                    let ls = t.mul_const(ls, &target)?;
                    let ls = t.sum(ls);
                    let d = t.add(d, ls)?;
                    let e = t.scale(d, 0.7);
                    let f = t.add(e, a)?;
                    Ok(f)
                },
                &[x.clone(), w, b, gamma, beta, v, g],
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let d = tape.detach(a);
        let p = tape.mul(a, d).unwrap();
        let out = tape.sum(p);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let g = tape.leaf(Tensor::full(&[3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.batch_norm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
