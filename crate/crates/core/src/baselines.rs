//! Competing temporal aggregators. Each emits a [`VisualSummary`] so the
//! reasoner never needs to know which one produced its input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Linear, SeededRng, Tensor};
use crate::sampler::FrameTokenSequence;
use crate::tformer::{QueryInit, QuestionTokens, TFormer, VisualSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    SingleFrame,
    Concat,
    MeanPool,
    SpatioTemporal,
}

impl BaselineKind {
    pub const ALL: [Self; 4] = [Self::SingleFrame, Self::Concat, Self::MeanPool, Self::SpatioTemporal];

    pub fn token(self) -> &'static str {
        match self {
            Self::SingleFrame => "single",
            Self::Concat => "concat",
            Self::MeanPool => "meanpool",
            Self::SpatioTemporal => "spatiotemporal",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.token() == s)
            .ok_or_else(|| Error::config(format!("unknown baseline `{s}`, expected single | concat | meanpool | spatiotemporal")))
    }
}

fn summary_from(g: &mut Graph, tokens: Tensor, proj: &Linear, frames: &FrameTokenSequence, source: Vec<usize>) -> Result<VisualSummary> {
    let x = g.constant(tokens);
    let tokens = proj.forward(g, x)?;
    Ok(VisualSummary {
        tokens,
        cross_attn_maps: Vec::new(),
        self_attn_maps: Vec::new(),
        source_frames: source,
        n_frames: frames.n(),
        tokens_per_frame: frames.t_f(),
    })
}

/// One uniformly drawn frame; `t_f` tokens.
pub fn single_frame(g: &mut Graph, frames: &FrameTokenSequence, proj: &Linear, rng: &mut SeededRng) -> Result<VisualSummary> {
    let i = if frames.n() == 1 { 0 } else { rng.below(frames.n()) };
    summary_from(g, frames.frame_tensor(i), proj, frames, vec![i])
}

/// Every frame token, in frame order; `n · t_f` tokens.
pub fn concat_frames(g: &mut Graph, frames: &FrameTokenSequence, proj: &Linear, max_len: usize) -> Result<VisualSummary> {
    let len = frames.n() * frames.t_f();
    if len > max_len {
        return Err(Error::SequenceTooLong { len, limit: max_len });
    }
    summary_from(g, frames.flattened(), proj, frames, (0..frames.n()).collect())
}

/// Position-wise mean over frames; `t_f` tokens.
///
/// Each coordinate is summed in sorted order, so the result does not depend
/// on frame order down to the last bit.
pub fn mean_pool_tensor(frames: &FrameTokenSequence) -> Tensor {
    let (n, t_f, d) = (frames.n(), frames.t_f(), frames.d());
    let src = frames.tokens().data();
    let mut out = vec![0.0; t_f * d];
    let mut column = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for (f, c) in column.iter_mut().enumerate() {
            *c = src[f * t_f * d + j];
        }
        column.sort_by(f64::total_cmp);
        *o = column.iter().sum::<f64>() / n as f64;
    }
    Tensor::new(vec![t_f, d], out).expect("mean-pool shape")
}

pub fn mean_pool(g: &mut Graph, frames: &FrameTokenSequence, proj: &Linear) -> Result<VisualSummary> {
    summary_from(g, mean_pool_tensor(frames), proj, frames, Vec::new())
}

/// Learnable queries jointly attending to question and all frame tokens.
pub fn spatio_temporal(
    g: &mut Graph,
    frames: &FrameTokenSequence,
    question: Option<&QuestionTokens>,
    tformer: &TFormer,
    rng: &mut SeededRng,
) -> Result<VisualSummary> {
    if tformer.init != QueryInit::Learnable {
        return Err(Error::config("spatio-temporal baseline needs learnable queries"));
    }
    tformer.forward(g, frames, question, rng)
}
