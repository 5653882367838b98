//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order. Because nodes can only refer to earlier nodes, a single reverse
//! sweep visits them in a valid topological order.

use std::any::Any;

use super::{gemm, sigmoid, softmax_in_place, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter, chosen by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Accumulated gradient for one parameter.
#[derive(Debug, Clone)]
pub struct GradientSlot<F> {
    pub param: ParamId,
    pub grad: Tensor<F>,
}

/// A user-defined differentiable operation.
pub trait Function<F: Scalar>: Send {
    /// Gradients for each input, given the gradient of the output. Entries
    /// for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>>;

    fn as_any(&self) -> &dyn Any;
}

enum Op<F: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Swish(Var),
    Sum(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is reachable through `grad_of`.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let vb = self.value(b).data();
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(vb)
            .for_each(|(x, &y)| *x = *x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.needs(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let out = super::swish(self.value(a));
        let rg = self.needs(a);
        self.push(out, Op::Swish(a), rg)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(a))?;
        let rg = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix("rms_norm")?;
        if self.value(gain).len() != cols {
            return Err(Error::shape(
                "rms_norm",
                format!("gain has {} entries for width {cols}", self.value(gain).len()),
            ));
        }
        let g = self.value(gain).data();
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_rms = Vec::with_capacity(rows);
        let width = F::from_usize(cols).unwrap();
        for i in 0..rows {
            let row = xv.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / width;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gj) in out.row_mut(i).iter_mut().zip(row).zip(g) {
                *o = v * inv * gj;
            }
        }
        let rg = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Row lookup into a `[vocab × width]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.value(table).as_matrix("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside table of {vocab} rows"),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(ids.len(), width, data)?;
        let rg = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Select rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = self.value(x).as_matrix("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let xv = self.value(x);
        let width = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(rows.len(), width, data)?;
        let rg = self.needs(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted mean next-token loss; see [`super::cross_entropy`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let lv = self.value(logits);
        super::check_cross_entropy(lv, targets, weights)?;
        let total_w: F = weights.iter().copied().sum();
        let mut probs = lv.data().to_vec();
        let vocab = lv.cols();
        let mut loss = F::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            softmax_in_place(row);
            if w != F::zero() {
                loss = loss - w * row[t].ln();
            }
        }
        let out = Tensor::scalar(loss / total_w);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.iter().map(|&w| w / total_w).collect(),
                probs,
            },
            rg,
        ))
    }

    /// Record a custom operation whose forward value was computed by the caller.
    pub fn apply(&mut self, inputs: &[Var], output: Tensor<F>, func: Box<dyn Function<F>>) -> Var {
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            rg,
        )
    }

    /// Access the state of a custom op, e.g. to read saved activations.
    pub fn function(&self, v: Var) -> Option<&dyn Function<F>> {
        match &self.nodes[v.0].op {
            Op::Custom { func, .. } => Some(func.as_ref()),
            _ => None,
        }
    }

    /// Run the reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` for every parameter node, in creation order.
    /// Parameters off the computation path get zero gradients.
    pub fn gradient_of(&self, loss: Var) -> Result<Vec<GradientSlot<F>>> {
        let grads = self.backward(loss)?;
        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some(GradientSlot {
                    param: id,
                    grad: grads
                        .get(Var(i))
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                }),
                _ => None,
            })
            .collect())
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                    acc(*a, Tensor::matrix(m, k, ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                    acc(*b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut t = g.clone();
                    t.data_mut()
                        .iter_mut()
                        .zip(bv.data())
                        .for_each(|(x, &y)| *x = *x * y);
                    acc(*a, t);
                }
                if self.needs(*b) {
                    let mut t = g.clone();
                    t.data_mut()
                        .iter_mut()
                        .zip(av.data())
                        .for_each(|(x, &y)| *x = *x * y);
                    acc(*b, t);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * *c)),
            Op::Swish(a) => {
                let av = self.value(*a);
                let mut t = g.clone();
                t.data_mut().iter_mut().zip(av.data()).for_each(|(d, &x)| {
                    let s = sigmoid(x);
                    *d = *d * s * (F::one() + x * (F::one() - s));
                });
                acc(*a, t);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut t = g.clone();
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let dot: F = pr.iter().zip(g.row(i)).map(|(&x, &y)| x * y).sum();
                    for (d, &pv) in t.row_mut(i).iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                acc(*a, t);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let width = F::from_usize(cols).unwrap();
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        let (xr, gr, inv) = (xv.row(i), g.row(i), inv_rms[i]);
                        let proj: F = xr
                            .iter()
                            .zip(gr)
                            .zip(gv)
                            .map(|((&xv, &dy), &gj)| dy * gj * xv)
                            .sum();
                        let coef = proj * inv * inv * inv / width;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = gr[j] * gv[j] * inv - xr[j] * coef;
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = Tensor::zeros(self.value(*gain).shape());
                    for i in 0..rows {
                        let inv = inv_rms[i];
                        for ((d, &xv), &dy) in dg.data_mut().iter_mut().zip(xv.row(i)).zip(g.row(i)) {
                            *d = *d + dy * xv * inv;
                        }
                    }
                    acc(*gain, dg);
                }
            }
            Op::Embedding { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d = *d + gv;
                    }
                }
                acc(*table, dt);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (r, &src) in rows.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d = *d + gv;
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g.item();
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let mut dl = Tensor::zeros(lv.shape());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let row = dl.row_mut(i);
                    for (d, &pv) in row.iter_mut().zip(p) {
                        *d = scale * w * pv;
                    }
                    row[t] = row[t] - scale * w;
                }
                acc(*logits, dl);
            }
            Op::Custom { inputs, func } => {
                let values: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let out = func.backward(&values, &node.value, g, &needs)?;
                for ((&v, grad), (need, val)) in inputs.iter().zip(out).zip(needs.iter().zip(&values)) {
                    if let (true, Some(grad)) = (*need, grad) {
                        if grad.shape() != val.shape() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("gradient {:?} for input {:?}", grad.shape(), val.shape()),
                            ));
                        }
                        acc(v, grad);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn sample(shape: &[usize], salt: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.731 + salt).sin())
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::<f64>::zeros(&[2, 3]));
        let l = g.sum(p);
        let slots = g.gradient_of(l).unwrap();
        assert_eq!(slots[0].grad.data(), &[1.0; 6]);
    }

    #[test]
    fn square_gives_six() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::scalar(3.0f64));
        let sq = g.mul(p, p).unwrap();
        let slots = g.gradient_of(sq).unwrap();
        assert_eq!(slots[0].grad.item(), 6.0);
    }

    #[test]
    fn unused_param_has_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::scalar(3.0f64));
        let q = g.param(ParamId(1), Tensor::<f64>::full(&[2], 5.0));
        let l = g.sum(p);
        let slots = g.gradient_of(l).unwrap();
        assert_eq!(slots[1].param, ParamId(1));
        assert_eq!(slots[1].grad.data(), &[0.0, 0.0]);
        let _ = q;
    }

    #[test]
    fn composite_chain_matches_finite_differences() {
        // loss = CE(softmax-free logits of rmsnorm(swish(x W) ⊙ (x V)) U)
        let w0 = sample(&[3, 4], 0.1);
        let v0 = sample(&[3, 4], 0.7);
        let u0 = sample(&[4, 5], 1.3);
        let gain0 = sample(&[4], 2.0);
        let x0 = sample(&[6, 3], 0.4);
        let targets = [0usize, 4, 2, 1, 3, 2];
        let weights = [1.0, 0.0, 1.0, 1.0, 0.5, 1.0];

        let build = |w: &Tensor<f64>, v: &Tensor<f64>, u: &Tensor<f64>, gain: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let wv = g.param(ParamId(0), w.clone());
            let vv = g.param(ParamId(1), v.clone());
            let uv = g.param(ParamId(2), u.clone());
            let gv = g.param(ParamId(3), gain.clone());
            let a = g.matmul(x, wv).unwrap();
            let a = g.swish(a);
            let b = g.matmul(x, vv).unwrap();
            let h = g.mul(a, b).unwrap();
            let h = g.rms_norm(h, gv, 1e-5).unwrap();
            let h = g.scale(h, 1.7);
            let logits = g.matmul(h, uv).unwrap();
            let loss = g.cross_entropy(logits, &targets, &weights).unwrap();
            (g, loss)
        };

        let (g, loss) = build(&w0, &v0, &u0, &gain0);
        let slots = g.gradient_of(loss).unwrap();
        let f = |w: &Tensor<f64>, v: &Tensor<f64>, u: &Tensor<f64>, gain: &Tensor<f64>| {
            let (g, l) = build(w, v, u, gain);
            g.value(l).item()
        };
        assert_close(slots[0].grad.data(), &central_diff(|t| f(t, &v0, &u0, &gain0), &w0, 1e-5), 1e-6);
        assert_close(slots[1].grad.data(), &central_diff(|t| f(&w0, t, &u0, &gain0), &v0, 1e-5), 1e-6);
        assert_close(slots[2].grad.data(), &central_diff(|t| f(&w0, &v0, t, &gain0), &u0, 1e-5), 1e-6);
        assert_close(slots[3].grad.data(), &central_diff(|t| f(&w0, &v0, &u0, t), &gain0, 1e-5), 1e-6);
    }

    #[test]
    fn softmax_embedding_gather_gradients() {
        let table0 = sample(&[5, 3], 0.9);
        let ids = [4usize, 1, 1, 0];
        let weights0 = sample(&[3, 3], 0.2);
        let build = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let tv = g.param(ParamId(0), t.clone());
            let e = g.embedding(tv, &ids).unwrap();
            let s = g.softmax_rows(e).unwrap();
            let picked = g.gather_rows(s, &[3, 0, 0]).unwrap();
            let w = g.constant(weights0.clone());
            let prod = g.mul(picked, w).unwrap();
            let l = g.sum(prod);
            (g, l)
        };
        let (g, l) = build(&table0);
        let slots = g.gradient_of(l).unwrap();
        let fd = central_diff(
            |t| {
                let (g, l) = build(t);
                g.value(l).item()
            },
            &table0,
            1e-5,
        );
        assert_close(slots[0].grad.data(), &fd, 1e-6);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::<f64>::zeros(&[2]));
        assert!(g.backward(p).is_err());
    }
}
