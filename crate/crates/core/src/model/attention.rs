//! Causal multi-head attention over packed sequences with per-head
//! rotary positions, as one differentiable graph operation.

use std::any::Any;

use crate::error::{Error, Result};
use crate::positioning::{dot, rotate_in_place};
use crate::tensor::{softmax_in_place, Function, Graph, Scalar, Tensor, Var};

/// A contiguous run of rows `[start, start + len)` forming one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Scores and probabilities of one head on one sequence.
#[derive(Debug, Clone)]
pub(crate) struct HeadMaps<F> {
    pub segment: usize,
    pub head: usize,
    /// Row-major `len × len`, upper triangle zero.
    pub probs: Vec<F>,
    /// Row-major `len × len` scaled logits, upper triangle `-inf`.
    pub scores: Option<Vec<F>>,
}

pub(crate) struct CausalAttention<F> {
    segments: Vec<Segment>,
    n_heads: usize,
    d_head: usize,
    theta: Vec<f64>,
    scale: F,
    q_rot: Tensor<F>,
    k_rot: Tensor<F>,
    maps: Vec<HeadMaps<F>>,
}

impl<F: Scalar> CausalAttention<F> {
    pub fn maps(&self) -> &[HeadMaps<F>] {
        &self.maps
    }
}

/// Shape bundle for [`causal_attention`].
pub(crate) struct AttentionSpec<'a> {
    pub segments: &'a [Segment],
    pub n_heads: usize,
    pub theta: &'a [f64],
    pub keep_scores: bool,
}

/// Records `softmax(mask(rot(Q) rot(K)^T / sqrt(d_head))) V` on the graph.
///
/// `q`, `k`, `v` are `N × d`; `z` is `N × 1` (shared by all heads) or
/// `N × n_heads`.
pub(crate) fn causal_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    z: Var,
    spec: &AttentionSpec<'_>,
) -> Result<Var> {
    let (n, d) = g.value(q).as_matrix("attention")?;
    for (name, t) in [("k", g.value(k)), ("v", g.value(v))] {
        if t.shape() != [n, d] {
            return Err(Error::shape("attention", format!("{name} is {:?}, q is [{n}, {d}]", t.shape())));
        }
    }
    let (zn, zc) = g.value(z).as_matrix("attention")?;
    if zn != n || !(zc == 1 || zc == spec.n_heads) {
        return Err(Error::shape(
            "attention",
            format!("positions are {zn}×{zc} for {n} tokens and {} heads", spec.n_heads),
        ));
    }
    if d % spec.n_heads != 0 || (d / spec.n_heads) != 2 * spec.theta.len() {
        return Err(Error::shape("attention", "head width does not match frequencies"));
    }
    let covered: usize = spec.segments.iter().map(|s| s.len).sum();
    if covered != n {
        return Err(Error::shape("attention", format!("segments cover {covered} of {n} rows")));
    }
    let d_head = d / spec.n_heads;
    let scale = F::one() / F::from_usize(d_head).unwrap().sqrt();

    let zv = g.value(z);
    let mut q_rot = g.value(q).clone();
    let mut k_rot = g.value(k).clone();
    for t in 0..n {
        for h in 0..spec.n_heads {
            let pos = zv.at(t, if zc == 1 { 0 } else { h }).to_f64().unwrap_or(f64::NAN);
            let cols = h * d_head..(h + 1) * d_head;
            rotate_in_place(&mut q_rot.row_mut(t)[cols.clone()], pos, spec.theta);
            rotate_in_place(&mut k_rot.row_mut(t)[cols], pos, spec.theta);
        }
    }

    let vv = g.value(v);
    let mut out = Tensor::zeros(&[n, d]);
    let mut maps = Vec::with_capacity(spec.segments.len() * spec.n_heads);
    for (si, seg) in spec.segments.iter().enumerate() {
        let len = seg.len;
        for h in 0..spec.n_heads {
            let cols = h * d_head..(h + 1) * d_head;
            let mut probs = vec![F::zero(); len * len];
            let mut scores = spec.keep_scores.then(|| vec![F::neg_infinity(); len * len]);
            for i in 0..len {
                let qi = &q_rot.row(seg.start + i)[cols.clone()];
                let row = &mut probs[i * len..i * len + i + 1];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = dot(qi, &k_rot.row(seg.start + j)[cols.clone()]) * scale;
                }
                if let Some(s) = scores.as_mut() {
                    s[i * len..i * len + i + 1].copy_from_slice(row);
                }
                softmax_in_place(row);
                let orow = &mut out.row_mut(seg.start + i)[cols.clone()];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vv.row(seg.start + j)[cols.clone()];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
            maps.push(HeadMaps {
                segment: si,
                head: h,
                probs,
                scores,
            });
        }
    }

    let func = CausalAttention {
        segments: spec.segments.to_vec(),
        n_heads: spec.n_heads,
        d_head,
        theta: spec.theta.to_vec(),
        scale,
        q_rot,
        k_rot,
        maps,
    };
    Ok(g.apply(&[q, k, v, z], out, Box::new(func)))
}

impl<F: Scalar> Function<F> for CausalAttention<F> {
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let v = inputs[2];
        let z = inputs[3];
        let (n, d) = (grad.shape()[0], grad.shape()[1]);
        let dh = self.d_head;
        let zc = z.cols();

        // gradients w.r.t. the rotated q/k first, then undo the rotation
        let mut dq_rot = Tensor::zeros(&[n, d]);
        let mut dk_rot = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        let mut dp = Vec::new();

        for map in &self.maps {
            let seg = self.segments[map.segment];
            let len = seg.len;
            let cols = map.head * dh..(map.head + 1) * dh;
            dp.clear();
            dp.resize(len, F::zero());
            for i in 0..len {
                let gi = &grad.row(seg.start + i)[cols.clone()];
                let prow = &map.probs[i * len..i * len + i + 1];
                let mut weighted = F::zero();
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &v.row(seg.start + j)[cols.clone()];
                    dp[j] = dot(gi, vj);
                    weighted = weighted + p * dp[j];
                    let dvj = &mut dv.row_mut(seg.start + j)[cols.clone()];
                    for (o, &x) in dvj.iter_mut().zip(gi) {
                        *o = *o + p * x;
                    }
                }
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - weighted) * self.scale;
                    if ds == F::zero() {
                        continue;
                    }
                    let kj = &self.k_rot.row(seg.start + j)[cols.clone()];
                    let dqi = &mut dq_rot.row_mut(seg.start + i)[cols.clone()];
                    for (o, &x) in dqi.iter_mut().zip(kj) {
                        *o = *o + ds * x;
                    }
                    let qi = &self.q_rot.row(seg.start + i)[cols.clone()];
                    let dkj = &mut dk_rot.row_mut(seg.start + j)[cols.clone()];
                    for (o, &x) in dkj.iter_mut().zip(qi) {
                        *o = *o + ds * x;
                    }
                }
            }
        }

        let mut dz = Tensor::zeros(z.shape());
        let mut dq = dq_rot;
        let mut dk = dk_rot;
        for t in 0..n {
            for h in 0..self.n_heads {
                let zcol = if zc == 1 { 0 } else { h };
                let pos = z.at(t, zcol).to_f64().unwrap_or(f64::NAN);
                let cols = h * dh..(h + 1) * dh;
                let mut dpos = F::zero();
                for (rot, dsrc) in [(&self.q_rot, &mut dq), (&self.k_rot, &mut dk)] {
                    let r = &rot.row(t)[cols.clone()];
                    let gslice = &mut dsrc.row_mut(t)[cols.clone()];
                    for (m, &theta) in self.theta.iter().enumerate() {
                        let (da, db) = (gslice[2 * m], gslice[2 * m + 1]);
                        let (a, b) = (r[2 * m], r[2 * m + 1]);
                        dpos = dpos + F::lit(theta) * (db * a - da * b);
                    }
                    // inverse rotation carries the gradient back to q/k
                    rotate_in_place(gslice, -pos, &self.theta);
                }
                let slot = &mut dz.data_mut()[t * zc + zcol];
                *slot = *slot + dpos;
            }
        }

        Ok(vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dv),
            needs[3].then_some(dz),
        ])
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
