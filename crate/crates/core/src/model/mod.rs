//! Small causal decoder-only transformer with a per-layer position mode.
//!
//! Blocks are pre-normalized (RMS norm) with a gated SiLU feed-forward.
//! The attention sublayer of every layer rotates queries and keys by
//! positions chosen by that layer's [`PositionMode`]; learned layers
//! predict them from the normalized attention input.

mod attention;
pub mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, Schedule};

use crate::error::{Error, Result};
use crate::positioning::{rope_frequencies, FrequencyVector, HeadTrace, PositionMode, PositionTrace, RepoParams};
use crate::tensor::{GradientSlot, Graph, ParamId, Scalar, Tensor, Var};
use attention::{causal_attention, AttentionSpec, CausalAttention};
pub(crate) use attention::Segment;

pub type TokenId = u32;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<F> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone)]
struct RepoIds {
    gate: usize,
    content: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    repo: Option<RepoIds>,
    ffn_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    layers: Vec<LayerIds>,
    final_norm: usize,
    lm_head: usize,
}

/// Which extras a forward pass should capture.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record assigned positions of every learned layer.
    pub trace: bool,
    /// Record per-head attention maps, logits and the unrotated q/k.
    pub attention: bool,
    /// Diagnostic: add this constant to every learned position.
    pub position_offset: f64,
}

impl ForwardOptions {
    pub fn traced() -> Self {
        Self {
            trace: true,
            attention: true,
            ..Self::default()
        }
    }
}

/// Attention of one head in one layer for a single sequence.
#[derive(Debug, Clone)]
pub struct AttentionCapture<F> {
    pub layer: usize,
    pub head: usize,
    pub mode: PositionMode,
    /// `L × L` probabilities; entries above the diagonal are exactly zero.
    pub probs: Tensor<F>,
    /// `L × L` scaled logits; entries above the diagonal are `-inf`.
    pub scores: Tensor<F>,
    /// Head slice of the query projection before rotation.
    pub queries: Tensor<F>,
    pub keys: Tensor<F>,
    pub positions: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `L × vocab` next-token logits.
    pub logits: Tensor<F>,
    pub trace: Option<PositionTrace>,
    pub attention: Option<Vec<AttentionCapture<F>>>,
}

/// Result of greedy decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<TokenId>,
    /// Generation stopped early at `max_seq_len`.
    pub truncated: bool,
}

/// Several sequences packed row-wise for one training step.
#[derive(Debug, Clone)]
pub struct PackedBatch<F> {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<F>,
    pub(crate) segments: Vec<Segment>,
}

impl<F: Scalar> PackedBatch<F> {
    /// Next-token pairs for `prompt ++ target` sequences, with the loss
    /// restricted to positions that predict a target token.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>,
    {
        let mut batch = PackedBatch {
            inputs: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
            segments: Vec::new(),
        };
        for (prompt, target) in pairs {
            if prompt.is_empty() || target.is_empty() {
                return Err(Error::Invalid("training pairs need a prompt and a target".into()));
            }
            let full: Vec<usize> = prompt.iter().chain(target).map(|&t| t as usize).collect();
            let len = full.len() - 1;
            batch.segments.push(Segment {
                start: batch.inputs.len(),
                len,
            });
            batch.inputs.extend_from_slice(&full[..len]);
            batch.targets.extend_from_slice(&full[1..]);
            batch
                .weights
                .extend((0..len).map(|i| if i + 1 >= prompt.len() { F::one() } else { F::zero() }));
        }
        if batch.segments.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        Ok(batch)
    }

    pub fn num_sequences(&self) -> usize {
        self.segments.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.inputs.len()
    }
}

pub(crate) struct Built {
    pub logits: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pub embedded: Var,
    attention: Vec<(usize, Var, Var, Var, Var)>,
    positions: Vec<(usize, Var)>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    config: ModelConfig,
    modes: Vec<PositionMode>,
    freqs: FrequencyVector,
    params: Vec<NamedParam<F>>,
    layout: Layout,
}

impl<F: Scalar> Model<F> {
    /// Deterministic initialization from `seed`.
    ///
    /// Projections draw from `N(0, 1/fan_in)`, residual output projections
    /// are further scaled by `1/sqrt(2 n_layers)`, norm gains start at one
    /// and position head projections start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |shape, how| {
            match how {
                Init::Ones => Tensor::full(shape, F::one()),
                Init::Zeros => Tensor::zeros(shape),
                Init::Normal(s) => {
                    let dist = Normal::new(0.0, s).expect("finite std");
                    Tensor::from_fn(shape, |_| F::lit(dist.sample(&mut rng)))
                }
            }
        })
    }

    /// Model with every parameter zeroed; used when loading checkpoints.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config, |shape, _| Tensor::zeros(shape))
    }

    fn build(config: ModelConfig, mut init: impl FnMut(&[usize], Init) -> Tensor<F>) -> Result<Self> {
        let modes = config.layer_modes();
        let freqs = rope_frequencies(config.d_head(), config.rope_base)?;
        let (d, v, ff, dp) = (config.d_model, config.vocab_size, config.d_ff, config.d_p);
        let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
        let resid = Init::Normal(1.0 / (d as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt());
        let mut params = Vec::new();
        let mut add = |name: String, shape: &[usize], how: Init| {
            params.push(NamedParam {
                name,
                value: init(shape, how),
            });
            params.len() - 1
        };

        let embed = add("tok_embedding".into(), &[v, d], Init::Normal(1.0));
        let mut layers = Vec::with_capacity(config.n_layers);
        for (k, mode) in modes.iter().enumerate() {
            let p = |s: &str| format!("layers.{k}.{s}");
            let attn_norm = add(p("attn_norm"), &[d], Init::Ones);
            let wq = add(p("wq"), &[d, d], fan(d));
            let wk = add(p("wk"), &[d, d], fan(d));
            let wv = add(p("wv"), &[d, d], fan(d));
            let wo = add(p("wo"), &[d, d], resid);
            let repo = mode.is_learned().then(|| {
                let heads = if config.share_fphi_across_heads { 1 } else { config.n_heads };
                RepoIds {
                    gate: add(p("repo.w_gate"), &[d, dp], fan(d)),
                    content: add(p("repo.w_content"), &[d, dp], fan(d)),
                    heads: add(p("repo.w_z"), &[dp, heads], Init::Zeros),
                }
            });
            let ffn_norm = add(p("ffn_norm"), &[d], Init::Ones);
            let w_gate = add(p("ffn.w_gate"), &[d, ff], fan(d));
            let w_up = add(p("ffn.w_up"), &[d, ff], fan(d));
            let w_down = add(p("ffn.w_down"), &[ff, d], Init::Normal(1.0 / (ff as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()));
            layers.push(LayerIds {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                repo,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
            });
        }
        let final_norm = add("final_norm".into(), &[d], Init::Ones);
        let lm_head = add("lm_head".into(), &[d, v], fan(d));

        Ok(Self {
            config,
            modes,
            freqs,
            params,
            layout: Layout {
                embed,
                layers,
                final_norm,
                lm_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_modes(&self) -> &[PositionMode] {
        &self.modes
    }

    pub fn frequencies(&self) -> &FrequencyVector {
        &self.freqs
    }

    pub fn params(&self) -> &[NamedParam<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Learned-position weights of `layer`, if that layer is learned.
    pub fn repo_params(&self, layer: usize) -> Option<RepoParams<F>> {
        let ids = self.layout.layers.get(layer)?.repo.as_ref()?;
        RepoParams::new(
            self.params[ids.gate].value.clone(),
            self.params[ids.content].value.clone(),
            self.params[ids.heads].value.clone(),
        )
        .ok()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            modes: self.modes.clone(),
            freqs: self.freqs.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.value.sq_norm().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            .sqrt()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .enumerate()
            .map(|(index, &id)| {
                if (id as usize) < self.config.vocab_size {
                    Ok(id as usize)
                } else {
                    Err(Error::TokenOutOfRange {
                        id,
                        index,
                        vocab: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Record the forward computation of packed sequences on `g`. With
    /// `trainable`, parameters become differentiable graph parameters whose
    /// [`ParamId`] is their index in [`Model::params`].
    pub(crate) fn build_graph(
        &self,
        g: &mut Graph<F>,
        tokens: &[usize],
        segments: &[Segment],
        opts: &ForwardOptions,
        trainable: bool,
    ) -> Result<Built> {
        if let Some(s) = segments.iter().find(|s| s.len > self.config.max_seq_len) {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                s.len, self.config.max_seq_len
            )));
        }
        let cfg = &self.config;
        let n = tokens.len();
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if trainable {
                    g.param(ParamId(i), p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let eps = F::lit(NORM_EPS);

        let mut x = g.embedding(vars[self.layout.embed], tokens)?;
        let embedded = x;
        let mut attention_nodes = Vec::new();
        let mut position_nodes = Vec::new();

        for (k, (ids, mode)) in self.layout.layers.iter().zip(&self.modes).enumerate() {
            let h = g.rms_norm(x, vars[ids.attn_norm], eps)?;
            let q = g.matmul(h, vars[ids.wq])?;
            let key = g.matmul(h, vars[ids.wk])?;
            let v = g.matmul(h, vars[ids.wv])?;
            let z = match mode {
                PositionMode::Linear => {
                    let mut pos = Vec::with_capacity(n);
                    for s in segments {
                        pos.extend((0..s.len).map(|i| F::from_usize(i).unwrap()));
                    }
                    g.constant(Tensor::matrix(n, 1, pos)?)
                }
                PositionMode::Constant { value } => g.constant(Tensor::full(&[n, 1], F::lit(*value))),
                PositionMode::Learned => {
                    let repo = ids.repo.as_ref().expect("learned layer has position weights");
                    let gate = g.matmul(h, vars[repo.gate])?;
                    let gate = g.swish(gate);
                    let content = g.matmul(h, vars[repo.content])?;
                    let r = g.mul(gate, content)?;
                    let mut z = g.matmul(r, vars[repo.heads])?;
                    if opts.position_offset != 0.0 {
                        let shape = g.value(z).shape().to_vec();
                        let offset = g.constant(Tensor::full(&shape, F::lit(opts.position_offset)));
                        z = g.add(z, offset)?;
                    }
                    position_nodes.push((k, z));
                    z
                }
            };
            let spec = AttentionSpec {
                segments,
                n_heads: cfg.n_heads,
                theta: self.freqs.theta(),
                keep_scores: opts.attention,
            };
            let att = causal_attention(g, q, key, v, z, &spec)?;
            attention_nodes.push((k, att, q, key, z));
            let o = g.matmul(att, vars[ids.wo])?;
            x = g.add(x, o)?;

            let h2 = g.rms_norm(x, vars[ids.ffn_norm], eps)?;
            let a = g.matmul(h2, vars[ids.w_gate])?;
            let a = g.swish(a);
            let b = g.matmul(h2, vars[ids.w_up])?;
            let m = g.mul(a, b)?;
            let f = g.matmul(m, vars[ids.w_down])?;
            x = g.add(x, f)?;
        }
        let x = g.rms_norm(x, vars[self.layout.final_norm], eps)?;
        let logits = g.matmul(x, vars[self.layout.lm_head])?;
        Ok(Built {
            logits,
            embedded,
            attention: attention_nodes,
            positions: position_nodes,
        })
    }

    /// Forward pass over one sequence.
    pub fn forward(&self, tokens: &[TokenId], opts: &ForwardOptions) -> Result<ForwardOutput<F>> {
        let ids = self.check_tokens(tokens)?;
        if ids.is_empty() {
            return Err(Error::Invalid("forward needs at least one token".into()));
        }
        let mut g = Graph::new();
        let segments = [Segment {
            start: 0,
            len: ids.len(),
        }];
        let built = self.build_graph(&mut g, &ids, &segments, opts, false)?;
        let trace = opts.trace.then(|| self.collect_trace(&g, &built, tokens));
        let attention = if opts.attention {
            Some(self.collect_attention(&g, &built)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            logits: g.value(built.logits).clone(),
            trace,
            attention,
        })
    }

    fn collect_trace(&self, g: &Graph<F>, built: &Built, tokens: &[TokenId]) -> PositionTrace {
        let mut heads = Vec::new();
        for &(layer, z) in &built.positions {
            let zv = g.value(z);
            for head in 0..self.config.n_heads {
                let col = if zv.cols() == 1 { 0 } else { head };
                heads.push(HeadTrace {
                    layer,
                    head,
                    positions: (0..zv.rows())
                        .map(|t| zv.at(t, col).to_f64().unwrap_or(f64::NAN))
                        .collect(),
                });
            }
        }
        PositionTrace {
            tokens: tokens.to_vec(),
            heads,
        }
    }

    fn collect_attention(&self, g: &Graph<F>, built: &Built) -> Result<Vec<AttentionCapture<F>>> {
        let dh = self.config.d_head();
        let mut out = Vec::new();
        for &(layer, att, q, k, z) in &built.attention {
            let func = g
                .function(att)
                .and_then(|f| f.as_any().downcast_ref::<CausalAttention<F>>())
                .expect("attention node");
            let zv = g.value(z);
            for map in func.maps() {
                let len = (map.probs.len() as f64).sqrt() as usize;
                let cols = map.head * dh..(map.head + 1) * dh;
                let slice = |t: &Tensor<F>| -> Result<Tensor<F>> {
                    let data = (0..len).flat_map(|i| t.row(i)[cols.clone()].to_vec()).collect();
                    Tensor::matrix(len, dh, data)
                };
                let zcol = if zv.cols() == 1 { 0 } else { map.head };
                out.push(AttentionCapture {
                    layer,
                    head: map.head,
                    mode: self.modes[layer],
                    probs: Tensor::matrix(len, len, map.probs.clone())?,
                    scores: Tensor::matrix(len, len, map.scores.clone().unwrap_or_default())?,
                    queries: slice(g.value(q))?,
                    keys: slice(g.value(k))?,
                    positions: (0..len).map(|t| zv.at(t, zcol)).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Mean target-token loss and parameter gradients for a packed batch.
    pub fn loss_and_gradients(&self, batch: &PackedBatch<F>) -> Result<(F, Vec<GradientSlot<F>>)> {
        if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad as TokenId,
                index: 0,
                vocab: self.config.vocab_size,
            });
        }
        let mut g = Graph::new();
        let built = self.build_graph(&mut g, &batch.inputs, &batch.segments, &ForwardOptions::default(), true)?;
        let loss = g.cross_entropy(built.logits, &batch.targets, &batch.weights)?;
        let value = g.value(loss).item();
        Ok((value, g.gradient_of(loss)?))
    }

    /// Mean target-token loss without gradients.
    pub fn loss(&self, batch: &PackedBatch<F>) -> Result<F> {
        let mut g = Graph::new();
        let built = self.build_graph(&mut g, &batch.inputs, &batch.segments, &ForwardOptions::default(), false)?;
        let loss = g.cross_entropy(built.logits, &batch.targets, &batch.weights)?;
        Ok(g.value(loss).item())
    }

    /// Greedy decoding; each step re-runs the full forward over the prefix.
    pub fn generate(&self, prompt: &[TokenId], max_new: usize) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Invalid("generate needs a non-empty prompt".into()));
        }
        self.check_tokens(prompt)?;
        let mut tokens = prompt.to_vec();
        let mut truncated = false;
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                log::warn!(
                    "generation truncated at max_seq_len {} ({} of {max_new} tokens produced)",
                    self.config.max_seq_len,
                    tokens.len() - prompt.len()
                );
                truncated = true;
                break;
            }
            let out = self.forward(&tokens, &ForwardOptions::default())?;
            tokens.push(argmax(out.logits.row(tokens.len() - 1)) as TokenId);
        }
        Ok(Generation { tokens, truncated })
    }

    /// Whether greedy decoding from `prompt` reproduces `target` exactly.
    ///
    /// Greedy decoding reproduces `target` iff every teacher-forced argmax
    /// along `prompt ++ target` already equals the next target token, so a
    /// single forward pass decides it.
    pub fn greedy_reproduces(&self, prompt: &[TokenId], target: &[TokenId]) -> Result<bool> {
        if prompt.is_empty() {
            return Err(Error::Invalid("greedy_reproduces needs a non-empty prompt".into()));
        }
        if target.is_empty() {
            return Ok(true);
        }
        if prompt.len() + target.len() > self.config.max_seq_len {
            return Ok(false);
        }
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(&target[..target.len() - 1]);
        let out = self.forward(&seq, &ForwardOptions::default())?;
        Ok(target
            .iter()
            .enumerate()
            .all(|(i, &t)| argmax(out.logits.row(prompt.len() - 1 + i)) == t as usize))
    }
}

#[derive(Clone, Copy)]
enum Init {
    Ones,
    Zeros,
    Normal(f64),
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
