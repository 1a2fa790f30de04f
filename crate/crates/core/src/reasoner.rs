//! Small trainable answer scorer.
//!
//! For each option the sequence `[visual tokens ∥ question ∥ option]` is
//! encoded by a post-norm transformer encoder, mean-pooled, and mapped to one
//! logit. Text tokens carry learned position embeddings; visual tokens carry
//! only a shared type embedding, so the reasoner is invariant to the order of
//! the visual rows and any temporal order has to be encoded in their content.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::residual_norm;
use crate::numerics::{FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, SeededRng, Var};

/// Token embedding table shared by the reasoner and the T-Former's question queries.
#[derive(Clone, Copy, Debug)]
pub struct Vocab {
    pub size: usize,
    pub d: usize,
    pub embedding: ParamId,
}

impl Vocab {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        if size == 0 || d == 0 {
            return Err(Error::config("vocabulary size and width must be positive"));
        }
        let std = 1.0 / (d as f64).sqrt();
        let embedding = store.register_normal(format!("{name}.embedding"), &[size, d], std, rng);
        Ok(Self { size, d, embedding })
    }

    /// Table lookup, `ids.len() × d`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embedding);
        g.gather_rows(table, ids)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet {
    pub options: Vec<Vec<usize>>,
    pub gold: usize,
}

impl AnswerSet {
    pub fn new(options: Vec<Vec<usize>>, gold: usize) -> Result<Self> {
        let a = Self { options, gold };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.options.len()) {
            return Err(Error::arg(format!("{} answer options, expected 2..=5", self.options.len())));
        }
        if self.options.iter().any(Vec::is_empty) {
            return Err(Error::arg("empty answer option"));
        }
        if self.gold >= self.options.len() {
            return Err(Error::arg(format!("gold {} out of {} options", self.gold, self.options.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl ReasonerConfig {
    pub fn desk(d: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            d,
            ffn_dim: 2 * d,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::config("reasoner layers, ffn_dim and max_len must be positive"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "reasoner d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    attn_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

impl EncoderLayer {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (a, _) = self.attn.forward(g, x, x, x)?;
        let x = residual_norm(g, x, a, &self.attn_norm)?;
        let h = self.ffn.forward(g, x)?;
        residual_norm(g, x, h, &self.ffn_norm)
    }
}

pub const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    visual_type: ParamId,
    text_positions: ParamId,
    input_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    head: Linear,
}

impl Reasoner {
    pub fn new(store: &mut ParamStore, name: &str, config: ReasonerConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let std = 1.0 / (d as f64).sqrt();
        let visual_type = store.register_normal(format!("{name}.visual_type"), &[1, d], std, rng);
        let text_positions = store.register_normal(format!("{name}.text_positions"), &[config.max_len, d], std, rng);
        let input_norm = LayerNorm::new(store, &format!("{name}.input_norm"), d);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.layer{i}");
            let layer = EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, config.heads, false, rng)?,
                attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, config.ffn_dim, rng),
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d),
            };
            layers.push(layer);
        }
        let head = Linear::with_std(store, &format!("{name}.head"), d, 1, HEAD_INIT_STD, rng);
        Ok(Self {
            config,
            visual_type,
            text_positions,
            input_norm,
            layers,
            head,
        })
    }

    /// One logit per option, as a `1 × |A|` row.
    pub fn score_answers(
        &self,
        g: &mut Graph,
        vocab: &Vocab,
        visual: Var,
        question_ids: &[usize],
        answers: &AnswerSet,
    ) -> Result<Var> {
        answers.validate()?;
        let vis = g.value(visual);
        if !vis.is_matrix() || vis.cols() != self.config.d {
            return Err(Error::ShapeMismatch {
                op: "reasoner visual tokens",
                left: vis.shape().to_vec(),
                right: vec![self.config.d],
            });
        }
        let n_vis = vis.rows();
        let longest = answers.options.iter().map(Vec::len).max().unwrap_or(0);
        let total = n_vis + question_ids.len() + longest;
        if total > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: total,
                limit: self.config.max_len,
            });
        }

        let vis_type = g.param(self.visual_type);
        let vis = g.add_row(visual, vis_type)?;
        let question = if question_ids.is_empty() {
            None
        } else {
            Some(vocab.embed(g, question_ids)?)
        };
        let positions = g.param(self.text_positions);
        let mut logits = Vec::with_capacity(answers.len());
        for option in &answers.options {
            let opt = vocab.embed(g, option)?;
            let text = match question {
                Some(q) => g.concat_rows(&[q, opt])?,
                None => opt,
            };
            let len = g.value(text).rows();
            let pos = g.slice_rows(positions, 0, len)?;
            let text = g.add(text, pos)?;
            let seq = g.concat_rows(&[vis, text])?;
            let mut h = self.input_norm.forward(g, seq)?;
            for layer in &self.layers {
                h = layer.forward(g, h)?;
            }
            let pooled = g.mean_rows(h);
            logits.push(self.head.forward(g, pooled)?);
        }
        g.concat_cols(&logits)
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    assert!(!logits.is_empty(), "predict on empty logits");
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy.
pub fn qa_loss(g: &mut Graph, logits: Var, gold: usize) -> Result<Var> {
    g.cross_entropy(logits, gold)
}
