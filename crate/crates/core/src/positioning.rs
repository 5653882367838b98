//! Position assignment and rotary encoding over real-valued positions.
//!
//! A position *assignment* maps each token to a scalar `z`; the rotary
//! *encoding* turns positions into rotations of query/key pairs so that
//! the attention logit between tokens `i` and `j` depends only on
//! `z_j - z_i`. Three assignment strategies exist:
//!
//! * [`PositionMode::Linear`]: `z_i = i`, classic rotary attention.
//! * [`PositionMode::Constant`]: `z_i = a` for all tokens, which makes every
//!   relative rotation the identity (attention without positional encoding).
//! * [`PositionMode::Learned`]: `z_i = (swish(h_i W_g) ⊙ (h_i W_c)) · W_z[head]`,
//!   predicted from the token's hidden state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, swish, Scalar, Tensor};

/// Frozen per-pair angular frequencies `θ_m = base^(-2m / d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyVector {
    base: f64,
    theta: Vec<f64>,
}

impl FrequencyVector {
    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Number of rotated pairs, `d_head / 2`.
    pub fn pairs(&self) -> usize {
        self.theta.len()
    }

    pub fn d_head(&self) -> usize {
        2 * self.theta.len()
    }
}

pub fn rope_frequencies(d_head: usize, base: f64) -> Result<FrequencyVector> {
    if d_head == 0 || d_head % 2 != 0 {
        return Err(Error::config(
            "d_head",
            format!("must be a positive even number, got {d_head}"),
        ));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::config("rope_base", format!("must be positive, got {base}")));
    }
    let theta = (0..d_head / 2)
        .map(|m| base.powf(-2.0 * m as f64 / d_head as f64))
        .collect();
    Ok(FrequencyVector { base, theta })
}

/// Rotate `v` in place: pair `(v[2m], v[2m+1])` turns by `position * θ_m`.
#[inline]
pub(crate) fn rotate_in_place<F: Scalar>(v: &mut [F], position: f64, theta: &[f64]) {
    for (pair, &t) in v.chunks_exact_mut(2).zip(theta) {
        let (s, c) = (position * t).sin_cos();
        let (s, c) = (F::lit(s), F::lit(c));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

/// Apply the rotary encoding `g_θ(position)` to one head vector.
pub fn rotate<F: Scalar>(v: &[F], position: F, freqs: &FrequencyVector) -> Result<Vec<F>> {
    if v.len() != freqs.d_head() {
        return Err(Error::shape(
            "rotate",
            format!("vector of length {} for d_head {}", v.len(), freqs.d_head()),
        ));
    }
    let mut out = v.to_vec();
    rotate_in_place(&mut out, position.to_f64().unwrap_or(f64::NAN), &freqs.theta);
    Ok(out)
}

/// How a layer assigns positions to tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// `z_i = i` (0-based textual index).
    Linear,
    /// `z_i = value` for every token.
    Constant { value: f64 },
    /// Positions predicted from hidden states.
    Learned,
}

impl PositionMode {
    pub fn short_name(&self) -> &'static str {
        match self {
            PositionMode::Linear => "Lin",
            PositionMode::Constant { .. } => "Const",
            PositionMode::Learned => "Learned",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, PositionMode::Learned)
    }
}

/// Weights of the learned position module for one layer.
///
/// `gate` and `content` are `d × d_p` and shared by every head of the layer;
/// `heads` is `d_p × n` where column `h` projects to head `h`'s position
/// (`n == 1` when all heads share one projection).
#[derive(Debug, Clone, PartialEq)]
pub struct RepoParams<F> {
    pub gate: Tensor<F>,
    pub content: Tensor<F>,
    pub heads: Tensor<F>,
}

impl<F: Scalar> RepoParams<F> {
    pub fn new(gate: Tensor<F>, content: Tensor<F>, heads: Tensor<F>) -> Result<Self> {
        let (d, dp) = gate.as_matrix("RepoParams")?;
        if content.shape() != gate.shape() {
            return Err(Error::shape(
                "RepoParams",
                format!("content {:?} vs gate {:?}", content.shape(), gate.shape()),
            ));
        }
        let (dp2, n) = heads.as_matrix("RepoParams")?;
        if dp2 != dp || n == 0 {
            return Err(Error::shape(
                "RepoParams",
                format!("head projection is {dp2}×{n}, expected {dp}×n with n ≥ 1"),
            ));
        }
        if dp >= d {
            return Err(Error::config("d_p", format!("must be smaller than d ({dp} ≥ {d})")));
        }
        Ok(Self {
            gate,
            content,
            heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.gate.shape()[0]
    }

    pub fn d_p(&self) -> usize {
        self.gate.shape()[1]
    }

    pub fn projections(&self) -> usize {
        self.heads.shape()[1]
    }
}

/// `r_i = swish(h_i W_g) ⊙ (h_i W_c)` for every row of `h`.
pub fn position_representation<F: Scalar>(h: &Tensor<F>, params: &RepoParams<F>) -> Result<Tensor<F>> {
    let (_, d) = h.as_matrix("position_representation")?;
    if d != params.d_model() {
        return Err(Error::shape(
            "position_representation",
            format!("hidden width {d}, module expects {}", params.d_model()),
        ));
    }
    let gate = swish(&matmul(h, &params.gate)?);
    let mut r = matmul(h, &params.content)?;
    r.data_mut()
        .iter_mut()
        .zip(gate.data())
        .for_each(|(c, &g)| *c = *c * g);
    Ok(r)
}

/// `z_i = r_i · W_z[:, head]`. With a shared projection every head maps to
/// column 0.
pub fn assign_position<F: Scalar>(r: &Tensor<F>, head: usize, params: &RepoParams<F>) -> Result<Vec<F>> {
    let (rows, dp) = r.as_matrix("assign_position")?;
    if dp != params.d_p() {
        return Err(Error::shape(
            "assign_position",
            format!("representation width {dp}, module expects {}", params.d_p()),
        ));
    }
    let n = params.projections();
    let col = if n == 1 {
        0
    } else if head < n {
        head
    } else {
        return Err(Error::Invalid(format!(
            "assign_position: head {head} does not exist (module has {n} heads)"
        )));
    };
    Ok((0..rows)
        .map(|i| {
            r.row(i)
                .iter()
                .enumerate()
                .map(|(m, &x)| x * params.heads.at(m, col))
                .sum()
        })
        .collect())
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Full `L×L` matrix of scaled logits `rotate(q_i, zq_i) · rotate(k_j, zk_j) / sqrt(d_head)`.
///
/// No causal mask is applied. In the model `zq` and `zk` are the same
/// vector; they are separate here so either side can be probed.
pub fn relative_rotary_logits<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    zq: &[F],
    zk: &[F],
    freqs: &FrequencyVector,
) -> Result<Tensor<F>> {
    let (lq, dq) = q.as_matrix("relative_rotary_logits")?;
    let (lk, dk) = k.as_matrix("relative_rotary_logits")?;
    if dq != freqs.d_head() || dk != freqs.d_head() {
        return Err(Error::shape(
            "relative_rotary_logits",
            format!("head width {dq}/{dk}, frequencies for {}", freqs.d_head()),
        ));
    }
    if zq.len() != lq || zk.len() != lk {
        return Err(Error::shape(
            "relative_rotary_logits",
            format!("{lq} queries / {lk} keys with {} / {} positions", zq.len(), zk.len()),
        ));
    }
    let to64 = |x: F| x.to_f64().unwrap_or(f64::NAN);
    let mut qr = q.clone();
    for i in 0..lq {
        rotate_in_place(qr.row_mut(i), to64(zq[i]), &freqs.theta);
    }
    let mut kr = k.clone();
    for j in 0..lk {
        rotate_in_place(kr.row_mut(j), to64(zk[j]), &freqs.theta);
    }
    let scale = F::one() / F::from_usize(dq).unwrap().sqrt();
    let mut out = Tensor::zeros(&[lq, lk]);
    for i in 0..lq {
        for j in 0..lk {
            out.data_mut()[i * lk + j] = dot(qr.row(i), kr.row(j)) * scale;
        }
    }
    Ok(out)
}

/// Assigned positions of one head in one learned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub layer: usize,
    pub head: usize,
    pub positions: Vec<f64>,
}

/// Positions captured from every learned layer during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PositionTrace {
    pub tokens: Vec<u32>,
    pub heads: Vec<HeadTrace>,
}

impl PositionTrace {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadTrace> {
        self.heads.iter().find(|t| t.layer == layer && t.head == head)
    }
}
