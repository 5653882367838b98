//! Diagnostics over assigned positions and attention maps.
//!
//! * [`range_stats`]: spread `max(z) - min(z)` of each learned head.
//! * [`classify_chunks`]: labels fixed-size windows of a position trace as
//!   constant, monotone or hybrid.
//! * [`attention_mass`]: per-token attention mass flowing from generated
//!   tokens into annotated context spans.

use std::fmt::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionCapture, ForwardOptions, Model};
use crate::positioning::PositionTrace;
use crate::tasks::{NiahExample, SpanAnnotation};
use crate::tensor::{Scalar, Tensor};

pub mod plot;

/// Published large-scale values, reported alongside toy results for context.
/// They are not expected to be matched by small models.
pub mod reference {
    pub const CHUNK_SIZE: usize = 16;
    pub const EPSILON: f64 = 0.2;
    pub const MONO_FRACTION: f64 = 0.04;
    pub const CONSTANT_FRACTION: f64 = 0.22;
    pub const NEEDLE_MASS_REPO: f64 = 2.013e-2;
    pub const NEEDLE_MASS_ROPE: f64 = 1.754e-2;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRange {
    pub layer: usize,
    pub head: usize,
    pub min: f64,
    pub max: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins spanning `[0, max(values)]`.
    pub fn equal_width(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("bins", "must be positive"));
        }
        let lo = values.iter().copied().fold(0.0f64, f64::min);
        let hi = values.iter().copied().fold(lo, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStat {
    pub heads: Vec<HeadRange>,
    pub histogram: Histogram,
}

impl RangeStat {
    pub fn max_distance(&self) -> f64 {
        self.heads.iter().map(|h| h.distance).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,min,max,distance\n");
        for h in &self.heads {
            let _ = writeln!(s, "{},{},{},{},{}", h.layer, h.head, h.min, h.max, h.distance);
        }
        s
    }
}

/// Per-head position spread plus a histogram of the spreads over `bins`
/// equal-width bins.
pub fn range_stats(trace: &PositionTrace, bins: usize) -> Result<RangeStat> {
    if trace.is_empty() {
        return Err(Error::Invalid("position trace has no learned heads".into()));
    }
    let heads = trace
        .heads
        .iter()
        .map(|h| {
            if h.positions.is_empty() {
                return Err(Error::Invalid(format!(
                    "layer {} head {} has no positions",
                    h.layer, h.head
                )));
            }
            if h.positions.iter().any(|z| !z.is_finite()) {
                return Err(Error::Invalid(format!(
                    "layer {} head {} has non-finite positions",
                    h.layer, h.head
                )));
            }
            let min = h.positions.iter().copied().fold(f64::INFINITY, f64::min);
            let max = h.positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(HeadRange {
                layer: h.layer,
                head: h.head,
                min,
                max,
                distance: max - min,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let distances: Vec<f64> = heads.iter().map(|h| h.distance).collect();
    Ok(RangeStat {
        histogram: Histogram::equal_width(&distances, bins)?,
        heads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkLabel {
    Constant,
    Mono,
    Hybrid,
}

/// Label one window. The constancy band is checked before monotonicity, so a
/// strictly increasing chunk with a tiny range is `Constant`.
pub fn classify_chunk(z: &[f64], epsilon: f64) -> ChunkLabel {
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let (lo, hi) = (mean - epsilon, mean + epsilon);
    if z.iter().all(|&x| lo <= x && x <= hi) {
        return ChunkLabel::Constant;
    }
    let increasing = z.windows(2).all(|w| w[0] < w[1]);
    let decreasing = z.windows(2).all(|w| w[0] > w[1]);
    if increasing || decreasing {
        ChunkLabel::Mono
    } else {
        ChunkLabel::Hybrid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PatternFractions {
    pub constant: f64,
    pub mono: f64,
    pub hybrid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkPatternReport {
    pub delta: usize,
    pub epsilon: f64,
    pub labels: Vec<ChunkLabel>,
    pub fractions: PatternFractions,
}

impl ChunkPatternReport {
    fn from_labels(delta: usize, epsilon: f64, labels: Vec<ChunkLabel>) -> Self {
        let n = labels.len().max(1) as f64;
        let count = |l: ChunkLabel| labels.iter().filter(|&&x| x == l).count() as f64 / n;
        let fractions = PatternFractions {
            constant: count(ChunkLabel::Constant),
            mono: count(ChunkLabel::Mono),
            hybrid: count(ChunkLabel::Hybrid),
        };
        Self {
            delta,
            epsilon,
            labels,
            fractions,
        }
    }

    pub fn count(&self, label: ChunkLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Pool the chunks of several reports that share `delta` and `epsilon`.
    pub fn merge<'a>(reports: impl IntoIterator<Item = &'a ChunkPatternReport>) -> Result<Self> {
        let mut iter = reports.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Invalid("no pattern reports to merge".into()))?;
        let (delta, epsilon) = (first.delta, first.epsilon);
        let mut labels = Vec::new();
        for r in iter {
            if r.delta != delta || r.epsilon != epsilon {
                return Err(Error::Invalid("pattern reports use different parameters".into()));
            }
            labels.extend_from_slice(&r.labels);
        }
        Ok(Self::from_labels(delta, epsilon, labels))
    }
}

/// Split `z` into consecutive windows of `delta` and label each one. A final
/// window shorter than `delta` is dropped.
pub fn classify_chunks(z: &[f64], delta: usize, epsilon: f64) -> Result<ChunkPatternReport> {
    if delta < 2 {
        return Err(Error::config("delta", format!("chunk size must be at least 2, got {delta}")));
    }
    if delta > z.len() {
        return Err(Error::config(
            "delta",
            format!("chunk size {delta} exceeds trace length {}", z.len()),
        ));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::config("epsilon", "must be a finite non-negative number"));
    }
    let labels = z.chunks_exact(delta).map(|c| classify_chunk(c, epsilon)).collect();
    Ok(ChunkPatternReport::from_labels(delta, epsilon, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPatterns {
    pub layer: usize,
    pub head: usize,
    pub report: ChunkPatternReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePatterns {
    pub heads: Vec<HeadPatterns>,
    pub overall: ChunkPatternReport,
    /// Fractions observed on long-context traces of a large model.
    pub reference: PatternFractions,
}

impl TracePatterns {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,chunk,label\n");
        for h in &self.heads {
            for (i, l) in h.report.labels.iter().enumerate() {
                let label = match l {
                    ChunkLabel::Constant => "constant",
                    ChunkLabel::Mono => "mono",
                    ChunkLabel::Hybrid => "hybrid",
                };
                let _ = writeln!(s, "{},{},{},{}", h.layer, h.head, i, label);
            }
        }
        s
    }
}

/// Classify every head of a trace in parallel and pool the labels.
pub fn classify_trace(trace: &PositionTrace, delta: usize, epsilon: f64) -> Result<TracePatterns> {
    if trace.is_empty() {
        return Err(Error::Invalid("position trace has no learned heads".into()));
    }
    let heads = trace
        .heads
        .par_iter()
        .map(|h| {
            Ok(HeadPatterns {
                layer: h.layer,
                head: h.head,
                report: classify_chunks(&h.positions, delta, epsilon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let overall = ChunkPatternReport::merge(heads.iter().map(|h| &h.report))?;
    Ok(TracePatterns {
        heads,
        overall,
        reference: PatternFractions {
            constant: reference::CONSTANT_FRACTION,
            mono: reference::MONO_FRACTION,
            hybrid: 1.0 - reference::CONSTANT_FRACTION - reference::MONO_FRACTION,
        },
    })
}

/// One head's attention probabilities for a single sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    /// `L × L`, row `i` is the distribution of query `i` over keys.
    pub probs: Tensor<f64>,
}

impl<F: Scalar> From<&AttentionCapture<F>> for AttentionMap {
    fn from(c: &AttentionCapture<F>) -> Self {
        Self {
            layer: c.layer,
            head: c.head,
            probs: c.probs.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMassReport {
    /// Mean probability per needle token.
    pub needle: f64,
    pub query: f64,
    pub rest: f64,
    /// Mean total probability (not per token) on keys outside the context,
    /// i.e. earlier generated tokens.
    pub generated_total: f64,
    pub needle_len: usize,
    pub query_len: usize,
    pub rest_len: usize,
    /// For each generated token, the mass accounted for by all buckets.
    pub reconstruction: Vec<f64>,
}

impl AttentionMassReport {
    /// Reconstructed mass averaged over generated tokens.
    pub fn mean_reconstruction(&self) -> f64 {
        self.reconstruction.iter().sum::<f64>() / self.reconstruction.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        format!(
            "span,tokens,per_token_mass\nneedle,{},{}\nquery,{},{}\nrest,{},{}\n",
            self.needle_len, self.needle, self.query_len, self.query, self.rest_len, self.rest
        )
    }
}

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Average, over generated query rows and all maps, of the probability that
/// lands in each span, divided by the span's token count.
pub fn attention_mass(
    maps: &[AttentionMap],
    spans: &SpanAnnotation,
    generated: Range<usize>,
) -> Result<AttentionMassReport> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Invalid("no attention maps".into()))?;
    let len = first.probs.rows();
    for m in maps {
        if m.probs.shape() != [len, len] {
            return Err(Error::shape(
                "attention_mass",
                format!("map for layer {} head {} is {:?}, expected [{len}, {len}]", m.layer, m.head, m.probs.shape()),
            ));
        }
    }
    let context = spans.context_len();
    spans.validate(context)?;
    if generated.is_empty() || generated.end > len {
        return Err(Error::Invalid(format!(
            "generated rows {generated:?} are empty or exceed sequence length {len}"
        )));
    }
    let all_spans = std::iter::once(&spans.needle)
        .chain(std::iter::once(&spans.query))
        .chain(&spans.rest);
    for s in all_spans {
        if overlaps(s, &generated) {
            return Err(Error::Invalid(format!(
                "generated rows {generated:?} overlap context span {s:?}"
            )));
        }
    }

    let span_sum = |row: &[f64], ranges: &[Range<usize>]| -> f64 {
        ranges.iter().map(|r| row[r.clone()].iter().sum::<f64>()).sum()
    };
    let needle = [spans.needle.clone()];
    let query = [spans.query.clone()];
    let denom = maps.len() as f64;
    let (mut n_tot, mut q_tot, mut r_tot, mut g_tot) = (0.0, 0.0, 0.0, 0.0);
    let mut reconstruction = Vec::with_capacity(generated.len());
    for t in generated.clone() {
        let (mut n, mut q, mut r, mut g) = (0.0, 0.0, 0.0, 0.0);
        for m in maps {
            let row = m.probs.row(t);
            n += span_sum(row, &needle);
            q += span_sum(row, &query);
            r += span_sum(row, &spans.rest);
            g += row[context..].iter().sum::<f64>();
        }
        let (n, q, r, g) = (n / denom, q / denom, r / denom, g / denom);
        reconstruction.push(n + q + r + g);
        n_tot += n;
        q_tot += q;
        r_tot += r;
        g_tot += g;
    }
    let rows = generated.len() as f64;
    Ok(AttentionMassReport {
        needle: n_tot / rows / spans.needle.len() as f64,
        query: q_tot / rows / spans.query.len() as f64,
        rest: r_tot / rows / spans.rest_len() as f64,
        generated_total: g_tot / rows,
        needle_len: spans.needle.len(),
        query_len: spans.query.len(),
        rest_len: spans.rest_len(),
        reconstruction,
    })
}

/// Teacher-force the answer after the context and measure where the answer
/// tokens attend.
pub fn niah_attention_mass<F: Scalar>(model: &Model<F>, example: &NiahExample) -> Result<AttentionMassReport> {
    let mut tokens = example.context.clone();
    tokens.extend_from_slice(&example.answer);
    let out = model.forward(
        &tokens,
        &ForwardOptions {
            attention: true,
            ..ForwardOptions::default()
        },
    )?;
    let maps: Vec<AttentionMap> = out
        .attention
        .unwrap_or_default()
        .iter()
        .map(AttentionMap::from)
        .collect();
    attention_mass(&maps, &example.spans, example.context.len()..tokens.len())
}

/// Element-wise mean of several reports over the same span layout.
pub fn mean_mass(reports: &[AttentionMassReport]) -> Result<AttentionMassReport> {
    let n = reports.len();
    if n == 0 {
        return Err(Error::Invalid("no attention mass reports to average".into()));
    }
    let avg = |f: fn(&AttentionMassReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
    Ok(AttentionMassReport {
        needle: avg(|r| r.needle),
        query: avg(|r| r.query),
        rest: avg(|r| r.rest),
        generated_total: avg(|r| r.generated_total),
        needle_len: reports[0].needle_len,
        query_len: reports[0].query_len,
        rest_len: reports[0].rest_len,
        reconstruction: reports.iter().flat_map(|r| r.reconstruction.iter().copied()).collect(),
    })
}
