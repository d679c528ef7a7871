//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use worldmodel::conditioning::ConditionSet;
use worldmodel::geometry::EgoPose;
use worldmodel::model::{Clip, ClipTokens, FrameGeometry, ModelConfig};
use worldmodel::tensor::{ParamStore, Real};
use worldmodel::tokenizer::{ScaleSchedule, ScaleTokenMap};
use worldmodel::toyworld::RigSpec;

/// Three scales (1×1, 2×2, 4×4) of 4 bits.
pub fn schedule3() -> ScaleSchedule {
    ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)], 4).unwrap()
}

/// Two layers, width 32, two heads of 16.
pub fn tiny_cfg(schedule: ScaleSchedule) -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 32,
        heads: 2,
        head_dim: 16,
        mlp_ratio: 2,
        text_slots: 32,
        ..ModelConfig::toy(schedule)
    }
}

/// Ego moving and turning along `times` with the given rig.
pub fn moving_frames(times: &[f64], rig: &RigSpec) -> Vec<FrameGeometry> {
    times
        .iter()
        .map(|&time| {
            let ego = EgoPose {
                position: [2.0 * time, 0.3 * time, 0.0],
                yaw: 0.2 * time,
            };
            FrameGeometry {
                time,
                ego,
                poses: (0..rig.views()).map(|v| rig.camera_pose(v, &ego)).collect(),
            }
        })
        .collect()
}

pub fn random_tokens(sched: &ScaleSchedule, frames: usize, views: usize, rng: &mut impl Rng) -> ClipTokens {
    (0..frames)
        .map(|t| {
            (0..views)
                .map(|v| {
                    (0..sched.num_scales())
                        .map(|k| {
                            let (h, w) = sched.grids[k];
                            ScaleTokenMap {
                                view: v,
                                time_index: t,
                                scale: k,
                                h,
                                w,
                                bits: sched.bits,
                                data: (0..h * w * sched.bits).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Random tokens on a moving two-view rig, 0.5 s apart, without conditions.
pub fn random_clip(sched: &ScaleSchedule, frames: usize, seed: u64) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = RigSpec::two_view(16, 16);
    let times: Vec<f64> = (0..frames).map(|t| 0.5 * t as f64).collect();
    Clip {
        frames: moving_frames(&times, &rig),
        tokens: random_tokens(sched, frames, 2, &mut rng),
        conditions: vec![ConditionSet::empty(2); frames],
    }
}

/// Replaces the zero-initialized gates with values in `[0.5, 1.5)` so every module is active.
pub fn open_gates<T: Real>(params: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().iter().filter(|n| n.ends_with(".gate")).cloned().collect();
    for n in names {
        let id = params.id(&n).unwrap();
        for v in params.value_mut(id).data_mut() {
            *v = T::lit(rng.gen_range(0.5..1.5));
        }
    }
}
