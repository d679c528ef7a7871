//! Bridges rendered toy-world frames to model clips and rollout plans.

use crate::conditioning::{frame_conditions, CategoryVocab, ConditionSet, ConditionSources};
use crate::engine::{PlanConditioning, PlanFrame, RolloutPlan};
use crate::error::{Error, Result};
use crate::model::{Clip, ClipTokens, FrameGeometry};
use crate::tensor::Real;
use crate::tokenizer::{ScaleTokenMap, TokenizerNet};
use crate::toyworld::Frame;

pub fn frame_geometry(frame: &Frame) -> FrameGeometry {
    FrameGeometry {
        time: frame.time,
        ego: frame.ego,
        poses: frame.poses.clone(),
    }
}

/// Multi-scale tokens of every view of every frame, `[t][v][k]`.
pub fn tokenize_frames<U: Real>(tokenizer: &TokenizerNet<U>, frames: &[Frame]) -> Result<ClipTokens> {
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            f.images
                .iter()
                .enumerate()
                .map(|(v, img)| tokenizer.encode_multiscale(img, v, t))
                .collect::<Result<Vec<Vec<ScaleTokenMap>>>>()
        })
        .collect()
}

/// Which annotations become conditions and how they are embedded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionSpec {
    pub sources: ConditionSources,
    pub vocab: CategoryVocab,
    pub text_slots: usize,
}

impl ConditionSpec {
    pub fn none() -> Self {
        Self {
            sources: ConditionSources::NONE,
            vocab: CategoryVocab::default(),
            text_slots: 1,
        }
    }

    pub fn all(text_slots: usize) -> Self {
        Self {
            sources: ConditionSources::ALL,
            vocab: CategoryVocab::default(),
            text_slots,
        }
    }

    pub fn frame(&self, frame: &Frame) -> Result<ConditionSet> {
        frame_conditions(&frame.annotation, &frame.poses, self.sources, &self.vocab, self.text_slots)
    }
}

/// Clip of `frames` with tokens from `tokenizer` and conditions per `conds`.
pub fn clip_from_frames<U: Real>(tokenizer: &TokenizerNet<U>, frames: &[Frame], conds: &ConditionSpec) -> Result<Clip> {
    if frames.is_empty() {
        return Err(Error::Data("clip needs at least one frame".into()));
    }
    Ok(Clip {
        frames: frames.iter().map(frame_geometry).collect(),
        tokens: tokenize_frames(tokenizer, frames)?,
        conditions: frames.iter().map(|f| conds.frame(f)).collect::<Result<_>>()?,
    })
}

/// Plan reproducing the times and poses of `frames`, with their annotations.
pub fn plan_from_frames(frames: &[Frame], conds: Option<&ConditionSpec>) -> RolloutPlan {
    RolloutPlan {
        frames: frames
            .iter()
            .map(|f| PlanFrame {
                time: f.time,
                ego: f.ego,
                poses: f.poses.clone(),
                annotation: Some(f.annotation.clone()),
            })
            .collect(),
        conditioning: conds.map(|c| PlanConditioning {
            sources: c.sources,
            vocab: c.vocab,
        }),
    }
}
