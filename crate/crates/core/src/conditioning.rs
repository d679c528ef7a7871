//! Condition encoders: text, 3D boxes and map polylines become per-view
//! feature rows for the image-wise cross-attention.
//!
//! Geometry is resolved up front into a [`ConditionInput`] (normalized
//! projected coordinates plus a fixed category embedding); the learned part
//! runs inside the autodiff graph via [`encode_conditions`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_corners_image, inside_expanded, project_point, sample_map_points, CameraPose, OrientedBox, Vec3};
use crate::nn::{fan_in_std, init_linear, linear};
use crate::tensor::{Array, Graph, ParamStore, Real, Var};
use crate::toyworld::FrameAnnotation;

/// Width of the fixed category embeddings.
pub const CATEGORY_DIM: usize = 16;
/// Points sampled per map element.
pub const MAP_POINTS: usize = 8;
/// Normalized image coordinates are clamped to the expanded rectangle.
const COORD_RANGE: (f64, f64) = (-0.5, 1.5);
/// Camera-frame depth floor used when projecting corners behind the camera.
const MIN_DEPTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionKind {
    Text,
    Box,
    Map,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConditionPayload {
    Text { slot: usize },
    /// Eight projected corners `(x, y)` in normalized image coordinates.
    Box { corners: [[f64; 2]; 8], category: Vec<f64> },
    /// Projected in-front sample points in normalized image coordinates.
    Map { points: Vec<[f64; 2]>, category: Vec<f64> },
}

/// One condition feature before the learned encoder: payload plus the
/// projected center `(x, y)` in normalized image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionInput {
    pub payload: ConditionPayload,
    pub center: [f64; 2],
}

impl ConditionInput {
    pub fn kind(&self) -> ConditionKind {
        match self.payload {
            ConditionPayload::Text { .. } => ConditionKind::Text,
            ConditionPayload::Box { .. } => ConditionKind::Box,
            ConditionPayload::Map { .. } => ConditionKind::Map,
        }
    }
}

/// Conditions of one frame, one list per view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub per_view: Vec<Vec<ConditionInput>>,
}

impl ConditionSet {
    pub fn empty(views: usize) -> Self {
        Self {
            per_view: vec![Vec::new(); views],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_view.iter().all(Vec::is_empty)
    }

    pub fn validate(&self) -> Result<()> {
        for c in self.per_view.iter().flatten() {
            let ok = c.center.iter().all(|x| (COORD_RANGE.0..=COORD_RANGE.1).contains(x));
            if !ok {
                return Err(Error::Contract(format!("condition center {:?} outside the expanded image", c.center)));
            }
        }
        Ok(())
    }
}

/// Which condition sources to attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSources {
    pub text: bool,
    pub boxes: bool,
    pub map: bool,
}

impl ConditionSources {
    pub const ALL: Self = Self {
        text: true,
        boxes: true,
        map: true,
    };
    pub const NONE: Self = Self {
        text: false,
        boxes: false,
        map: false,
    };
}

/// Fixed (non-learned) category embeddings, derived from the category string and a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    pub seed: u64,
}

impl Default for CategoryVocab {
    fn default() -> Self {
        Self { seed: 0x0ca7 }
    }
}

/// 64-bit FNV-1a, a stable string hash.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl CategoryVocab {
    pub fn embed(&self, category: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(category) ^ self.seed);
        let s = 1.0 / (CATEGORY_DIM as f64).sqrt();
        (0..CATEGORY_DIM).map(|_| rng.gen_range(-1.0..1.0) * s * 3f64.sqrt()).collect()
    }
}

/// Whitespace tokens hashed into `slots` learned embeddings, one feature per
/// token, all centered at the image midpoint.
pub fn encode_text(description: &str, slots: usize) -> Vec<ConditionInput> {
    description
        .split_whitespace()
        .map(|w| ConditionInput {
            payload: ConditionPayload::Text {
                slot: (fnv1a(&w.to_lowercase()) % slots as u64) as usize,
            },
            center: [0.5, 0.5],
        })
        .collect()
}

fn normalized(pose: &CameraPose, p: Vec3) -> [f64; 2] {
    let c = pose.to_camera(p);
    let z = c[2].max(MIN_DEPTH);
    let k = &pose.intrinsics;
    let u = (k.fx * c[0] / z + k.cx) / pose.width as f64;
    let v = (k.fy * c[1] / z + k.cy) / pose.height as f64;
    [u.clamp(COORD_RANGE.0, COORD_RANGE.1), v.clamp(COORD_RANGE.0, COORD_RANGE.1)]
}

/// Box feature input for one view, absent when no corner projects into the
/// expanded image rectangle.
pub fn encode_box(bx: &OrientedBox, pose: &CameraPose, category: &str, vocab: &CategoryVocab) -> Option<ConditionInput> {
    if !box_corners_image(bx, pose).visible {
        return None;
    }
    let corners = bx.corners().map(|c| normalized(pose, c));
    let mut center = [0.0; 2];
    for c in &corners {
        center[0] += c[0] / 8.0;
        center[1] += c[1] / 8.0;
    }
    Some(ConditionInput {
        payload: ConditionPayload::Box {
            corners,
            category: vocab.embed(category),
        },
        center,
    })
}

/// Map element input for one view: `n` sampled points, in-front points kept.
/// Absent when no point projects into the expanded rectangle.
pub fn encode_map_element(
    polyline: &[Vec3],
    category: &str,
    pose: &CameraPose,
    vocab: &CategoryVocab,
    n: usize,
) -> Result<Option<ConditionInput>> {
    let samples = sample_map_points(polyline, n)?;
    let front: Vec<Vec3> = samples.into_iter().filter(|p| project_point(pose, *p).in_front).collect();
    if !front.iter().any(|p| inside_expanded(pose, &project_point(pose, *p))) {
        return Ok(None);
    }
    let points: Vec<[f64; 2]> = front.iter().map(|p| normalized(pose, *p)).collect();
    let mut center = [0.0; 2];
    for p in &points {
        center[0] += p[0] / points.len() as f64;
        center[1] += p[1] / points.len() as f64;
    }
    Ok(Some(ConditionInput {
        payload: ConditionPayload::Map {
            points,
            category: vocab.embed(category),
        },
        center,
    }))
}

/// Per-view conditions of one annotated frame.
pub fn frame_conditions(
    ann: &FrameAnnotation,
    poses: &[CameraPose],
    sources: ConditionSources,
    vocab: &CategoryVocab,
    text_slots: usize,
) -> Result<ConditionSet> {
    let text = if sources.text {
        encode_text(&ann.text, text_slots)
    } else {
        Vec::new()
    };
    let mut per_view = Vec::with_capacity(poses.len());
    for pose in poses {
        let mut list = text.clone();
        if sources.boxes {
            list.extend(ann.boxes.iter().filter_map(|b| encode_box(&b.bx, pose, &b.category, vocab)));
        }
        if sources.map {
            for m in &ann.map {
                if let Some(c) = encode_map_element(&m.polyline, &m.category, pose, vocab, MAP_POINTS)? {
                    list.push(c);
                }
            }
        }
        per_view.push(list);
    }
    Ok(ConditionSet { per_view })
}

/// Registers the learned encoder parameters under `cond.`.
pub fn init_condition_params<T: Real>(store: &mut ParamStore<T>, width: usize, text_slots: usize, rng: &mut impl Rng) {
    store.insert_normal("cond.text.emb", &[text_slots, width], 1.0, rng);
    init_linear(store, "cond.box.fc1", 16, width, fan_in_std(16) * 2.0, rng);
    init_linear(store, "cond.box.fc2", width, width, fan_in_std(width), rng);
    init_linear(store, "cond.box.proj", width + CATEGORY_DIM, width, fan_in_std(width + CATEGORY_DIM), rng);
    init_linear(store, "cond.map.fc1", 2, width, 1.0, rng);
    init_linear(store, "cond.map.fc2", width, width, fan_in_std(width), rng);
    init_linear(store, "cond.map.proj", width + CATEGORY_DIM, width, fan_in_std(width + CATEGORY_DIM), rng);
}

/// Learned features for `inputs`, one row per input in the same order.
/// Returns `None` for an empty list.
pub fn encode_conditions<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, inputs: &[ConditionInput]) -> Result<Option<Var>> {
    if inputs.is_empty() {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(inputs.len());
    let mut text_table = None;
    for c in inputs {
        let row = match &c.payload {
            ConditionPayload::Text { slot } => {
                let table = match text_table {
                    Some(t) => t,
                    None => {
                        let t = g.param_named(p, "cond.text.emb")?;
                        text_table = Some(t);
                        t
                    }
                };
                g.gather_rows(table, &[*slot])?
            }
            ConditionPayload::Box { corners, category } => {
                let flat: Vec<f64> = corners.iter().flat_map(|c| [c[0] - 0.5, c[1] - 0.5]).collect();
                let x = g.constant(Array::from_f64(&[1, 16], &flat)?);
                let h = linear(g, p, "cond.box.fc1", x)?;
                let h = g.gelu(h);
                let h = linear(g, p, "cond.box.fc2", h)?;
                let h = g.gelu(h);
                let cat = g.constant(Array::from_f64(&[1, CATEGORY_DIM], category)?);
                let h = g.concat_cols(&[h, cat])?;
                linear(g, p, "cond.box.proj", h)?
            }
            ConditionPayload::Map { points, category } => {
                if points.is_empty() {
                    return Err(Error::Contract("map condition without points".into()));
                }
                let flat: Vec<f64> = points.iter().flat_map(|c| [c[0] - 0.5, c[1] - 0.5]).collect();
                let x = g.constant(Array::from_f64(&[points.len(), 2], &flat)?);
                let h = linear(g, p, "cond.map.fc1", x)?;
                let h = g.gelu(h);
                let h = linear(g, p, "cond.map.fc2", h)?;
                let h = g.gelu(h);
                let pooled = g.max_rows(h);
                let cat = g.constant(Array::from_f64(&[1, CATEGORY_DIM], category)?);
                let h = g.concat_cols(&[pooled, cat])?;
                linear(g, p, "cond.map.proj", h)?
            }
        };
        rows.push(row);
    }
    Ok(Some(g.concat_rows(&rows)?))
}

/// Evaluates [`encode_conditions`] outside of training, `[n, width]` in f64.
pub fn condition_features(p: &ParamStore<f64>, inputs: &[ConditionInput]) -> Result<Option<Array<f64>>> {
    let mut g = Graph::new();
    Ok(encode_conditions(&mut g, p, inputs)?.map(|v| g.value(v).clone()))
}
