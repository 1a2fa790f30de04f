//! End-to-end video-QA model: a visual aggregator feeding the reasoner.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{concat_frames, mean_pool, single_frame, spatio_temporal, BaselineKind};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, ParamStore, SeededRng, Tensor, Var};
use crate::reasoner::{AnswerSet, Reasoner, ReasonerConfig, Vocab};
use crate::sampler::{FrameTokenSequence, SamplingStrategy};
use crate::synthgen::TaskSpec;
use crate::tformer::{QueryInit, QuestionTokens, TFormer, TFormerConfig, VisualSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    TFormer,
    Baseline(BaselineKind),
    /// Same reasoner with an all-zero visual summary.
    Blind,
}

impl ModelKind {
    pub fn all() -> Vec<Self> {
        let mut v = vec![Self::TFormer];
        v.extend(BaselineKind::ALL.map(Self::Baseline));
        v.push(Self::Blind);
        v
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TFormer => f.write_str("tformer"),
            Self::Baseline(b) => b.fmt(f),
            Self::Blind => f.write_str("blind"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tformer" => Ok(Self::TFormer),
            "blind" => Ok(Self::Blind),
            other => other.parse().map(Self::Baseline).map_err(|_| {
                Error::config(format!(
                    "unknown model `{s}`, expected tformer | single | concat | meanpool | spatiotemporal | blind"
                ))
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Used by `TFormer` only; the spatio-temporal baseline always learns its queries.
    pub query_init: QueryInit,
    pub tformer: TFormerConfig,
    pub reasoner: ReasonerConfig,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Small-scale defaults sized for `spec`, with `k` output frames.
    pub fn desk(kind: ModelKind, spec: &TaskSpec, k: usize) -> Self {
        Self {
            kind,
            query_init: QueryInit::Sampled(SamplingStrategy::KMedoids),
            tformer: TFormerConfig::desk(spec.d, spec.t_f, k, spec.n.max(32)),
            reasoner: ReasonerConfig::desk(spec.d),
            vocab_size: spec.vocab_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tformer.validate()?;
        self.reasoner.validate()?;
        if self.reasoner.d != self.tformer.d_out {
            return Err(Error::config(format!(
                "reasoner width {} differs from T-Former output width {}",
                self.reasoner.d, self.tformer.d_out
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        Ok(())
    }

    fn effective_init(&self) -> QueryInit {
        match self.kind {
            ModelKind::Baseline(BaselineKind::SpatioTemporal) => QueryInit::Learnable,
            _ => self.query_init,
        }
    }
}

#[derive(Clone, Debug)]
enum Visual {
    TFormer(TFormer),
    Projected(BaselineKind, Linear),
    Blind,
}

#[derive(Debug)]
pub struct QaOutput {
    /// `1 × |A|`.
    pub logits: Var,
    pub summary: Option<VisualSummary>,
}

#[derive(Clone, Debug)]
pub struct VideoQaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    visual: Visual,
    reasoner: Reasoner,
}

/// RNG stream label for parameter initialization.
const INIT_STREAM: u64 = 0x1417;

impl VideoQaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(seed, &[INIT_STREAM]);
        let mut store = ParamStore::new();
        let d_out = config.tformer.d_out;
        let vocab = Vocab::new(&mut store, "vocab", config.vocab_size, d_out, &mut rng)?;
        let visual = match config.kind {
            ModelKind::TFormer | ModelKind::Baseline(BaselineKind::SpatioTemporal) => Visual::TFormer(TFormer::new(
                &mut store,
                "tformer",
                config.tformer.clone(),
                config.effective_init(),
                &mut rng,
            )?),
            ModelKind::Baseline(b) => Visual::Projected(b, Linear::new(&mut store, "projection", config.tformer.d, d_out, &mut rng)),
            ModelKind::Blind => Visual::Blind,
        };
        let reasoner = Reasoner::new(&mut store, "reasoner", config.reasoner.clone(), &mut rng)?;
        Ok(Self {
            config,
            store,
            vocab,
            visual,
            reasoner,
        })
    }

    pub fn tformer(&self) -> Option<&TFormer> {
        match &self.visual {
            Visual::TFormer(t) => Some(t),
            _ => None,
        }
    }

    /// Logits for one question. `rng` drives stochastic frame sampling only.
    pub fn forward(
        &self,
        g: &mut Graph,
        frames: &FrameTokenSequence,
        question_ids: &[usize],
        answers: &AnswerSet,
        rng: &mut SeededRng,
    ) -> Result<QaOutput> {
        let summary = match &self.visual {
            Visual::TFormer(t) => {
                let question = if t.config.use_question_guidance {
                    let ids: Vec<usize> = question_ids.iter().chain(answers.options.iter().flatten()).copied().collect();
                    let embeddings = self.vocab.embed(g, &ids)?;
                    Some(QuestionTokens { embeddings, token_ids: ids })
                } else {
                    None
                };
                let s = match self.config.kind {
                    ModelKind::Baseline(BaselineKind::SpatioTemporal) => spatio_temporal(g, frames, question.as_ref(), t, rng)?,
                    _ => t.forward(g, frames, question.as_ref(), rng)?,
                };
                Some(s)
            }
            Visual::Projected(kind, proj) => Some(match kind {
                BaselineKind::SingleFrame => single_frame(g, frames, proj, rng)?,
                BaselineKind::MeanPool => mean_pool(g, frames, proj)?,
                BaselineKind::Concat => {
                    let longest = answers.options.iter().map(Vec::len).max().unwrap_or(0);
                    let room = self.config.reasoner.max_len.saturating_sub(question_ids.len() + longest);
                    concat_frames(g, frames, proj, room)?
                }
                BaselineKind::SpatioTemporal => unreachable!("spatio-temporal runs through the T-Former"),
            }),
            Visual::Blind => None,
        };
        let visual = match &summary {
            Some(s) => s.tokens,
            None => g.constant(Tensor::zeros(&[self.config.tformer.output_tokens(), self.config.tformer.d_out])),
        };
        let logits = self.reasoner.score_answers(g, &self.vocab, visual, question_ids, answers)?;
        Ok(QaOutput { logits, summary })
    }
}
