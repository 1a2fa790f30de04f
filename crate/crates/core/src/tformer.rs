//! T-Former: compresses frame tokens into a few timestamped query tokens.
//!
//! Per layer, in order:
//!
//! 1. self-attention over `[temporal queries ∥ question tokens]`,
//! 2. cross-attention from that sequence to every (timestamped) frame token,
//! 3. a bottleneck feed-forward block,
//!
//! each wrapped as `norm(x + sublayer(x))`. Queries are sampled once before
//! the first layer and carry the timestamp of their source frame. Frame tokens
//! are layer-normalized before their timestamps are added. After the last layer the question rows are dropped and the
//! remaining `k · t_f` rows are projected to the reasoner width, so the output
//! size never depends on the number of input frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{init_residual_block, residual_norm};
use crate::numerics::{AttnWeights, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, SeededRng, Tensor, Var};
use crate::sampler::{init_temporal_queries, learnable_queries, FrameTokenSequence, SamplingStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TFormerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn_dim: usize,
    pub t_f: usize,
    pub k: usize,
    pub n_max: usize,
    pub d_out: usize,
    pub use_question_guidance: bool,
    pub use_timestamps: bool,
    /// One projection for queries, keys and values in every attention block.
    #[serde(default)]
    pub tied_qkv: bool,
}

impl TFormerConfig {
    /// Small-scale defaults: 2 layers, 4 heads, 64-wide feed-forward.
    pub fn desk(d: usize, t_f: usize, k: usize, n_max: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d,
            ffn_dim: 64,
            t_f,
            k,
            n_max,
            d_out: d,
            use_question_guidance: true,
            use_timestamps: true,
            tied_qkv: false,
        }
    }

    /// Full-size settings: 2 layers, 12 heads, 768-wide feed-forward.
    pub fn full(d: usize, t_f: usize, k: usize, n_max: usize) -> Self {
        Self {
            heads: 12,
            ffn_dim: 768,
            ..Self::desk(d, t_f, k, n_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("T-Former needs at least one layer"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if [self.d, self.ffn_dim, self.t_f, self.k, self.n_max, self.d_out].contains(&0) {
            return Err(Error::config("T-Former dimensions must be positive"));
        }
        if self.k > self.n_max {
            return Err(Error::config(format!("k = {} exceeds n_max = {}", self.k, self.n_max)));
        }
        Ok(())
    }

    /// Number of output tokens, `k · t_f`.
    pub fn output_tokens(&self) -> usize {
        self.k * self.t_f
    }
}

/// How the temporal queries are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryInit {
    Sampled(SamplingStrategy),
    Learnable,
}

impl fmt::Display for QueryInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sampled(s) => s.fmt(f),
            Self::Learnable => f.write_str("learnable"),
        }
    }
}

impl FromStr for QueryInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learnable" {
            Ok(Self::Learnable)
        } else {
            s.parse().map(Self::Sampled)
        }
    }
}

/// Embedded question (and option) tokens entering the self-attention.
#[derive(Clone, Debug)]
pub struct QuestionTokens {
    pub embeddings: Var,
    pub token_ids: Vec<usize>,
}

/// Fixed-size visual block handed to the reasoner, plus attention traces.
#[derive(Clone, Debug)]
pub struct VisualSummary {
    /// `(k · t_f) × d_out` for the T-Former; baseline-specific otherwise.
    pub tokens: Var,
    /// Per layer, `heads × L_q × (n · t_f)`.
    pub cross_attn_maps: Vec<AttnWeights>,
    /// Per layer, `heads × L_q × L_q`.
    pub self_attn_maps: Vec<AttnWeights>,
    pub source_frames: Vec<usize>,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
}

impl VisualSummary {
    /// Length of the self-attention input sequence, if there was one.
    pub fn self_attn_len(&self) -> Option<usize> {
        self.self_attn_maps.first().map(|m| m.shape()[1])
    }
}

/// Learnable per-frame-position vectors, `n_max × d`.
#[derive(Clone, Copy, Debug)]
pub struct TimestampTable {
    pub table: ParamId,
}

pub const TIMESTAMP_INIT_STD: f64 = 0.2;

impl TimestampTable {
    pub fn new(store: &mut ParamStore, name: &str, n_max: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self {
            table: store.register_normal(format!("{name}.table"), &[n_max, d], TIMESTAMP_INIT_STD, rng),
        }
    }
}

/// Flattened frame tokens with row `i` of the table added to every token of
/// frame `i`; the plain flattened tokens when disabled.
pub fn add_timestamps(g: &mut Graph, frames: &FrameTokenSequence, ts: &TimestampTable, enabled: bool) -> Result<Var> {
    let flat = g.constant(frames.flattened());
    let ids: Vec<usize> = (0..frames.n()).collect();
    stamp(g, flat, &ids, frames.t_f(), ts, enabled)
}

/// Adds row `frame_ids[b]` of the table to each token of the `b`-th `t_f` block.
fn stamp(g: &mut Graph, flat: Var, frame_ids: &[usize], t_f: usize, ts: &TimestampTable, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(flat);
    }
    let table = g.param(ts.table);
    let n_max = g.value(table).rows();
    if let Some(&i) = frame_ids.iter().find(|&&i| i >= n_max) {
        return Err(Error::arg(format!("frame {i} is beyond n_max = {n_max}")));
    }
    let rows: Vec<usize> = frame_ids.iter().flat_map(|&i| std::iter::repeat_n(i, t_f)).collect();
    let stamps = g.gather_rows(table, &rows)?;
    g.add(flat, stamps)
}

#[derive(Clone, Debug)]
pub struct TFormerLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl TFormerLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &TFormerConfig, rng: &mut SeededRng) -> Result<Self> {
        let layer = Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), cfg.d, cfg.heads, cfg.tied_qkv, rng)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), cfg.d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cfg.d, cfg.heads, cfg.tied_qkv, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), cfg.d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d, cfg.ffn_dim, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), cfg.d),
        };
        init_residual_block(store, &[&layer.self_attn, &layer.cross_attn], &layer.ffn, rng);
        Ok(layer)
    }

    /// Self-attention over the joint query sequence, residual, norm.
    pub fn contextualize(&self, g: &mut Graph, q: Var) -> Result<(Var, AttnWeights)> {
        let (attn, w) = self.self_attn.forward(g, q, q, q)?;
        Ok((residual_norm(g, q, attn, &self.self_norm)?, w))
    }

    /// Cross-attention from `q` to the frame tokens, residual, norm.
    pub fn cross_attend(&self, g: &mut Graph, q: Var, frames_ts: Var) -> Result<(Var, AttnWeights)> {
        let (attn, w) = self.cross_attn.forward(g, q, frames_ts, frames_ts)?;
        Ok((residual_norm(g, q, attn, &self.cross_norm)?, w))
    }

    pub fn feed_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ffn.forward(g, x)?;
        residual_norm(g, x, h, &self.ffn_norm)
    }
}

#[derive(Clone, Debug)]
pub struct TFormer {
    pub config: TFormerConfig,
    pub init: QueryInit,
    pub layers: Vec<TFormerLayer>,
    pub timestamps: TimestampTable,
    /// Normalizes frame tokens before timestamps are added.
    pub frame_norm: LayerNorm,
    pub output: Linear,
    /// Maps question embeddings from the reasoner width to `d` when they differ.
    pub question_proj: Option<Linear>,
    pub learned_queries: Option<ParamId>,
}

impl TFormer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: TFormerConfig,
        init: QueryInit,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|i| TFormerLayer::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect::<Result<Vec<_>>>()?;
        let timestamps = TimestampTable::new(store, &format!("{name}.timestamps"), config.n_max, config.d, rng);
        let frame_norm = LayerNorm::new(store, &format!("{name}.frame_norm"), config.d);
        let output = Linear::new(store, &format!("{name}.output"), config.d, config.d_out, rng);
        let question_proj = (config.d != config.d_out)
            .then(|| Linear::new(store, &format!("{name}.question_proj"), config.d_out, config.d, rng));
        let learned_queries = match init {
            QueryInit::Learnable => {
                let init = learnable_queries(config.k, config.t_f, config.d, rng)?;
                Some(store.register(format!("{name}.queries"), init.queries))
            }
            QueryInit::Sampled(_) => None,
        };
        Ok(Self {
            config,
            init,
            layers,
            timestamps,
            frame_norm,
            output,
            question_proj,
            learned_queries,
        })
    }

    /// Full forward pass. `question` is ignored when guidance is disabled.
    pub fn forward(
        &self,
        g: &mut Graph,
        frames: &FrameTokenSequence,
        question: Option<&QuestionTokens>,
        rng: &mut SeededRng,
    ) -> Result<VisualSummary> {
        let cfg = &self.config;
        if frames.d() != cfg.d || frames.t_f() != cfg.t_f {
            return Err(Error::config(format!(
                "frames are {}×{} per frame, T-Former expects {}×{}",
                frames.t_f(),
                frames.d(),
                cfg.t_f,
                cfg.d
            )));
        }
        if frames.n() > cfg.n_max {
            return Err(Error::arg(format!("{} frames exceed n_max = {}", frames.n(), cfg.n_max)));
        }
        if cfg.k > frames.n() {
            return Err(Error::arg(format!("k = {} exceeds {} input frames", cfg.k, frames.n())));
        }

        let (temporal, source_frames) = match (self.init, self.learned_queries) {
            (QueryInit::Learnable, Some(id)) => (g.param(id), Vec::new()),
            (QueryInit::Sampled(strategy), _) => {
                let set = init_temporal_queries(frames, strategy, cfg.k, rng)?;
                (g.constant(set.queries), set.source_frames)
            }
            (QueryInit::Learnable, None) => unreachable!("learnable init without parameter"),
        };

        let temporal = if source_frames.is_empty() {
            temporal
        } else {
            stamp(g, temporal, &source_frames, cfg.t_f, &self.timestamps, cfg.use_timestamps)?
        };
        let mut x = match question.filter(|_| cfg.use_question_guidance) {
            Some(q) => {
                let emb = match &self.question_proj {
                    Some(p) => p.forward(g, q.embeddings)?,
                    None => q.embeddings,
                };
                if g.value(emb).cols() != cfg.d {
                    return Err(Error::config("question embedding width does not match T-Former"));
                }
                g.concat_rows(&[temporal, emb])?
            }
            None => temporal,
        };

        let flat = g.constant(frames.flattened());
        let normed = self.frame_norm.forward(g, flat)?;
        let all: Vec<usize> = (0..frames.n()).collect();
        let frames_ts = stamp(g, normed, &all, frames.t_f(), &self.timestamps, cfg.use_timestamps)?;
        let mut self_maps = Vec::with_capacity(cfg.layers);
        let mut cross_maps = Vec::with_capacity(cfg.layers);
        for layer in &self.layers {
            let (h, w) = layer.contextualize(g, x)?;
            self_maps.push(w);
            let (h, w) = layer.cross_attend(g, h, frames_ts)?;
            cross_maps.push(w);
            x = layer.feed_forward(g, h)?;
        }
        let kept = if g.value(x).rows() == cfg.output_tokens() {
            x
        } else {
            g.slice_rows(x, 0, cfg.output_tokens())?
        };
        let tokens = self.output.forward(g, kept)?;
        Ok(VisualSummary {
            tokens,
            cross_attn_maps: cross_maps,
            self_attn_maps: self_maps,
            source_frames,
            n_frames: frames.n(),
            tokens_per_frame: frames.t_f(),
        })
    }
}

/// Last-layer cross-attention averaged over heads: `L_q × (n·t_f)`, or
/// `L_q × n` with each frame's `t_f` key columns summed.
pub fn export_attention_maps(summary: &VisualSummary, frame_granularity: bool) -> Result<Tensor> {
    let last = summary
        .cross_attn_maps
        .last()
        .ok_or_else(|| Error::arg("summary carries no attention maps"))?;
    let (heads, lq, lk) = (last.shape()[0], last.shape()[1], last.shape()[2]);
    let mut mean = vec![0.0; lq * lk];
    for block in last.data().chunks(lq * lk) {
        for (m, w) in mean.iter_mut().zip(block) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= heads as f64);
    if !frame_granularity {
        return Tensor::new(vec![lq, lk], mean);
    }
    let t_f = summary.tokens_per_frame;
    let n = lk / t_f;
    let mut out = vec![0.0; lq * n];
    for r in 0..lq {
        for f in 0..n {
            out[r * n + f] = mean[r * lk + f * t_f..r * lk + (f + 1) * t_f].iter().sum();
        }
    }
    Tensor::new(vec![lq, n], out)
}
