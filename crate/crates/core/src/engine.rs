//! Incremental generation with a scale-bucketed cache of pre-projection latents.
//!
//! Every processed `(t, k)` step leaves a bucket holding its token metadata,
//! its token maps and the normalized latents that feed each attention module's
//! key/value projections. A new step gathers only the buckets its modules may
//! attend to and runs [`forward_chunk`] on its own tokens against them. Whole
//! frames beyond the cache capacity are evicted oldest-first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{frame_conditions, CategoryVocab, ConditionSet, ConditionSources};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, EgoPose, Vec3};
use crate::image::Image;
use crate::model::{
    forward_chunk, step_tokens, AttnModule, ChunkInput, ForwardOptions, FrameGeometry, KeyMemory, Memory, Model,
    ModelConfig, TokenMeta,
};
use crate::tensor::{sigmoid, Array, Graph, Real};
use crate::tokenizer::{prefix_feature, ScaleTokenMap, TokenizerNet};
use crate::toyworld::FrameAnnotation;

/// One processed `(t, k)` step.
#[derive(Clone, Debug)]
pub struct Bucket<T> {
    pub tokens: Vec<TokenMeta>,
    /// One map per view.
    pub maps: Vec<ScaleTokenMap>,
    /// `[module][layer]`, `[tokens, width]` each.
    pub latents: Vec<Vec<Rc<Array<T>>>>,
}

/// Buckets of the retained frames, keyed by `(t, k)`.
#[derive(Clone, Debug)]
pub struct RecurrentCache<T> {
    capacity: Option<usize>,
    buckets: BTreeMap<(usize, usize), Bucket<T>>,
    /// Frames below this index were evicted or precede the sequence.
    floor: usize,
}

impl<T: Real> RecurrentCache<T> {
    /// Cache for a sequence starting at frame 0 that retains at most `capacity` frames.
    pub fn new(capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return Err(Error::Config("cache capacity must be at least one frame".into()));
        }
        Ok(Self {
            capacity,
            buckets: BTreeMap::new(),
            floor: 0,
        })
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn bucket(&self, t: usize, k: usize) -> Option<&Bucket<T>> {
        self.buckets.get(&(t, k))
    }

    pub fn steps(&self) -> Vec<(usize, usize)> {
        self.buckets.keys().copied().collect()
    }

    /// Distinct retained frame indices, ascending.
    pub fn frames(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.buckets.keys().map(|&(t, _)| t).collect();
        out.dedup();
        out
    }

    pub fn insert(&mut self, t: usize, k: usize, bucket: Bucket<T>) {
        self.buckets.insert((t, k), bucket);
    }

    pub fn remove(&mut self, t: usize, k: usize) -> Option<Bucket<T>> {
        self.buckets.remove(&(t, k))
    }

    /// Drops the oldest frames until at most `capacity` remain.
    pub fn evict(&mut self) {
        let Some(cap) = self.capacity else { return };
        let frames = self.frames();
        if frames.len() <= cap {
            return;
        }
        let keep_from = frames[frames.len() - cap];
        self.buckets.retain(|&(t, _), _| t >= keep_from);
        self.floor = self.floor.max(keep_from);
        debug_assert!(self.frames().len() <= cap);
    }

    /// Token maps of frame `t` for steps `0..k`, per view.
    pub fn frame_prefix(&self, t: usize, k: usize) -> Result<Vec<Vec<ScaleTokenMap>>> {
        let mut per_view: Vec<Vec<ScaleTokenMap>> = Vec::new();
        for kk in 0..k {
            let b = self
                .bucket(t, kk)
                .ok_or_else(|| Error::CacheIntegrity(format!("bucket ({t}, {kk}) missing")))?;
            if per_view.is_empty() {
                per_view = vec![Vec::with_capacity(k); b.maps.len()];
            }
            for (v, m) in b.maps.iter().enumerate() {
                per_view[v].push(m.clone());
            }
        }
        Ok(per_view)
    }

    fn step_visible(cfg: &ModelConfig, module: AttnModule, q: (usize, usize), key: (usize, usize)) -> bool {
        match module {
            AttnModule::Image | AttnModule::CrossView => key.0 == q.0 && key.1 < q.1,
            AttnModule::Global | AttnModule::CrossFrame => key != q && cfg.causality.admits(q, key),
        }
    }

    /// Checks that every bucket step `(t, k)` may read is present.
    pub fn check_integrity(&self, cfg: &ModelConfig, t: usize, k: usize) -> Result<()> {
        let lo = match self.capacity {
            Some(m) => self.floor.max(t.saturating_sub(m)),
            None => self.floor,
        };
        for t2 in lo..=t {
            for k2 in 0..cfg.schedule.num_scales() {
                let needed = cfg
                    .kv_modules()
                    .into_iter()
                    .any(|m| Self::step_visible(cfg, m, (t, k), (t2, k2)));
                if needed && !self.buckets.contains_key(&(t2, k2)) {
                    return Err(Error::CacheIntegrity(format!(
                        "step ({t}, {k}) needs bucket ({t2}, {k2}), which is missing"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Memory of the admissible buckets of each module for step `(t, k)`.
    pub fn memory(&self, cfg: &ModelConfig, t: usize, k: usize) -> Result<Memory<T>> {
        self.check_integrity(cfg, t, k)?;
        let modules = cfg.kv_modules();
        let mut out = Vec::with_capacity(modules.len());
        for (mi, &m) in modules.iter().enumerate() {
            let chosen: Vec<&Bucket<T>> = self
                .buckets
                .iter()
                .filter(|(&step, _)| Self::step_visible(cfg, m, (t, k), step))
                .filter(|(&(t2, _), _)| self.capacity.is_none_or(|cap| t - t2 <= cap))
                .map(|(_, b)| b)
                .collect();
            if chosen.is_empty() {
                out.push(KeyMemory::empty(cfg.layers, cfg.width));
                continue;
            }
            let tokens = chosen.iter().flat_map(|b| b.tokens.iter().copied()).collect();
            let latents = (0..cfg.layers)
                .map(|l| {
                    let parts: Vec<&Array<T>> = chosen.iter().map(|b| b.latents[mi][l].as_ref()).collect();
                    concat_rows(&parts).map(Rc::new)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(KeyMemory { tokens, latents });
        }
        Ok(Memory { modules: out })
    }
}

fn concat_rows<T: Real>(parts: &[&Array<T>]) -> Result<Array<T>> {
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        if p.cols() != cols {
            return Err(Error::Contract("cached latents differ in width".into()));
        }
        data.extend_from_slice(p.data());
    }
    Array::new(vec![data.len() / cols, cols], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// Sign of the logit.
    Argmax,
    /// Each bit is +1 with probability `sigmoid(logit / temperature)`.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    pub temperature: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn argmax() -> Self {
        Self {
            mode: SampleMode::Argmax,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn bernoulli(temperature: f64, seed: u64) -> Self {
        Self {
            mode: SampleMode::Bernoulli,
            temperature,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::bernoulli(1.0, 0)
    }
}

fn sample_bits<T: Real>(logits: &[T], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Vec<i8> {
    match cfg.mode {
        SampleMode::Argmax => logits.iter().map(|&z| if z.f64() >= 0.0 { 1 } else { -1 }).collect(),
        SampleMode::Bernoulli => logits
            .iter()
            .map(|&z| {
                let p = sigmoid(z.f64() / cfg.temperature);
                if rng.gen::<f64>() < p {
                    1
                } else {
                    -1
                }
            })
            .collect(),
    }
}

/// Where the tokens of a processed step come from.
pub enum StepSource<'a> {
    Sample(&'a SamplerConfig, &'a mut ChaCha8Rng),
    /// Known tokens (context frames or teacher forcing), one map per view.
    Given(&'a [ScaleTokenMap]),
}

pub struct StepOutput<T> {
    /// `[tokens, bits]`, views outermost.
    pub logits: Array<T>,
    pub maps: Vec<ScaleTokenMap>,
}

/// Runs step `(t, k)` against the cache and stores its bucket.
pub fn process_step<T: Real>(
    model: &Model<T>,
    cache: &mut RecurrentCache<T>,
    frame: &FrameGeometry,
    t: usize,
    k: usize,
    conditions: &ConditionSet,
    source: StepSource<'_>,
) -> Result<StepOutput<T>> {
    let cfg = &model.cfg;
    let sched = &cfg.schedule;
    if k >= sched.num_scales() {
        return Err(Error::Contract(format!("scale step {k} outside the schedule")));
    }
    let memory = cache.memory(cfg, t, k)?;
    let tokens = step_tokens(sched, frame, t, k)?;
    let views = frame.views();
    let (h, w) = sched.grids[k];
    let cells = h * w;
    let mut prefix = Array::zeros(&[tokens.len(), sched.bits]);
    if k > 0 {
        let per_view = cache.frame_prefix(t, k)?;
        if per_view.len() != views {
            return Err(Error::CacheIntegrity(format!(
                "frame {t} cached {} views, step has {views}",
                per_view.len()
            )));
        }
        for (v, maps) in per_view.iter().enumerate() {
            let f = prefix_feature(maps, sched)?;
            prefix.data_mut()[v * cells * sched.bits..(v + 1) * cells * sched.bits].copy_from_slice(f.data());
        }
    }
    let mut cond_map = BTreeMap::new();
    if !conditions.is_empty() {
        if conditions.per_view.len() != views {
            return Err(Error::Contract(format!(
                "conditions for {} views, frame has {views}",
                conditions.per_view.len()
            )));
        }
        cond_map.insert(t, conditions.clone());
    }
    let chunk = ChunkInput {
        tokens: tokens.clone(),
        prefix,
        conditions: cond_map,
    };
    let opts = ForwardOptions {
        window: cache.capacity(),
        ..ForwardOptions::default()
    };
    let mut g = Graph::new();
    let out = forward_chunk(&mut g, cfg, &model.params, &chunk, &memory, &opts)?;
    let logits = g.value(out.logits).clone();
    if !logits.all_finite() {
        return Err(Error::Numeric(format!("non-finite logits at step ({t}, {k})")));
    }
    let maps = match source {
        StepSource::Given(maps) => {
            if maps.len() != views || maps.iter().any(|m| (m.h, m.w) != (h, w) || m.bits != sched.bits || !m.is_binary()) {
                return Err(Error::Contract(format!("given tokens do not fit step ({t}, {k})")));
            }
            maps.to_vec()
        }
        StepSource::Sample(sampler, rng) => {
            sampler.validate()?;
            let bits = sample_bits(logits.data(), sampler, rng);
            (0..views)
                .map(|v| ScaleTokenMap {
                    view: v,
                    time_index: t,
                    scale: k,
                    h,
                    w,
                    bits: sched.bits,
                    data: bits[v * cells * sched.bits..(v + 1) * cells * sched.bits].to_vec(),
                })
                .collect()
        }
    };
    let latents = out
        .latents
        .iter()
        .map(|per_layer| per_layer.iter().map(|&v| Rc::new(g.value(v).clone())).collect())
        .collect();
    cache.insert(
        t,
        k,
        Bucket {
            tokens,
            maps: maps.clone(),
            latents,
        },
    );
    Ok(StepOutput { logits, maps })
}

/// Samples the tokens of step `(t, k)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_step<T: Real>(
    model: &Model<T>,
    cache: &mut RecurrentCache<T>,
    frame: &FrameGeometry,
    t: usize,
    k: usize,
    conditions: &ConditionSet,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput<T>> {
    process_step(model, cache, frame, t, k, conditions, StepSource::Sample(sampler, rng))
}

/// How the plan's annotations turn into model conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConditioning {
    pub sources: ConditionSources,
    pub vocab: CategoryVocab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFrame {
    pub time: f64,
    pub ego: EgoPose,
    pub poses: Vec<CameraPose>,
    /// World-space annotation projected into each view at generation time.
    pub annotation: Option<FrameAnnotation>,
}

/// Times, camera poses and condition sources of a rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPlan {
    pub frames: Vec<PlanFrame>,
    pub conditioning: Option<PlanConditioning>,
}

impl RolloutPlan {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::Contract("rollout plan is empty".into()));
        };
        let views = first.poses.len();
        if views == 0 {
            return Err(Error::Contract("rollout plan has no views".into()));
        }
        for w in self.frames.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Contract(format!("plan times not increasing: {} then {}", w[0].time, w[1].time)));
            }
        }
        for f in &self.frames {
            if f.poses.len() != views {
                return Err(Error::Contract("plan frames differ in view count".into()));
            }
            for p in &f.poses {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn views(&self) -> usize {
        self.frames.first().map_or(0, |f| f.poses.len())
    }

    pub fn geometry(&self, t: usize) -> FrameGeometry {
        let f = &self.frames[t];
        FrameGeometry {
            time: f.time,
            ego: f.ego,
            poses: f.poses.clone(),
        }
    }

    /// Conditions of frame `t` for a model with `text_slots` text slots.
    pub fn conditions(&self, t: usize, text_slots: usize) -> Result<ConditionSet> {
        let f = &self.frames[t];
        match (&self.conditioning, &f.annotation) {
            (Some(c), Some(ann)) => frame_conditions(ann, &f.poses, c.sources, &c.vocab, text_slots),
            _ => Ok(ConditionSet::empty(f.poses.len())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(s).map_err(|e| Error::Data(format!("rollout plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Every camera translated by `shift` in global coordinates.
pub fn plan_camera_shift(base: &RolloutPlan, shift: Vec3) -> RolloutPlan {
    let mut plan = base.clone();
    for f in &mut plan.frames {
        for p in &mut f.poses {
            *p = p.translated(shift);
        }
    }
    plan
}

/// Moves every camera by `shift` expressed in the ego frame of its own frame.
pub fn plan_ego_shift(base: &RolloutPlan, shift: Vec3) -> RolloutPlan {
    let mut plan = base.clone();
    for f in &mut plan.frames {
        let global = crate::geometry::mat_vec(&f.ego.rotation(), shift);
        for p in &mut f.poses {
            *p = p.translated(global);
        }
    }
    plan
}

/// Shift of `meters` along the ego's lateral (left) axis of each frame.
pub fn plan_lateral_shift(base: &RolloutPlan, meters: f64) -> RolloutPlan {
    plan_ego_shift(base, [0.0, meters, 0.0])
}

/// Negates each bit independently with probability `rate`.
pub fn inject_bitwise_errors(tokens: &[ScaleTokenMap], rate: f64, seed: u64) -> Result<Vec<ScaleTokenMap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inject_bitwise_errors_with(tokens, rate, &mut rng)
}

pub fn inject_bitwise_errors_with(tokens: &[ScaleTokenMap], rate: f64, rng: &mut impl Rng) -> Result<Vec<ScaleTokenMap>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("error rate {rate} outside [0, 1]")));
    }
    Ok(tokens
        .iter()
        .map(|m| {
            let mut m = m.clone();
            if rate > 0.0 {
                for b in &mut m.data {
                    if rate >= 1.0 || rng.gen::<f64>() < rate {
                        *b = -*b;
                    }
                }
            }
            m
        })
        .collect())
}

/// One generated (or context) frame.
#[derive(Clone, Debug)]
pub struct RolloutFrame {
    pub time: f64,
    /// `[view][scale]`.
    pub tokens: Vec<Vec<ScaleTokenMap>>,
    pub images: Vec<Image>,
    pub is_context: bool,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub frames: Vec<RolloutFrame>,
    /// Frames still cached at the end.
    pub retained: Vec<usize>,
}

/// Frame-by-frame rollout of `plan`. The first `context.len()` frames use
/// tokens of the given images instead of samples.
pub fn generate_video<T: Real, U: Real>(
    model: &Model<T>,
    tokenizer: &TokenizerNet<U>,
    plan: &RolloutPlan,
    context: &[Vec<Image>],
    capacity: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Rollout> {
    plan.validate()?;
    sampler.validate()?;
    let cfg = &model.cfg;
    if tokenizer.schedule() != &cfg.schedule {
        return Err(Error::Config("tokenizer and model scale schedules differ".into()));
    }
    if context.len() > plan.frames.len() {
        return Err(Error::Data(format!(
            "{} context frames for a {}-frame plan",
            context.len(),
            plan.frames.len()
        )));
    }
    let views = plan.views();
    let mut cache = RecurrentCache::<T>::new(capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut frames = Vec::with_capacity(plan.frames.len());
    for t in 0..plan.frames.len() {
        let geom = plan.geometry(t);
        let conds = plan.conditions(t, cfg.text_slots)?;
        let given = match context.get(t) {
            Some(images) => {
                if images.len() != views {
                    return Err(Error::Data(format!("context frame {t} has {} views, plan has {views}", images.len())));
                }
                let per_view = images
                    .iter()
                    .enumerate()
                    .map(|(v, img)| {
                        if (img.height, img.width) != (tokenizer.cfg.image_h, tokenizer.cfg.image_w) {
                            return Err(Error::Data(format!(
                                "context image {}×{} does not match the tokenizer's {}×{}",
                                img.width, img.height, tokenizer.cfg.image_w, tokenizer.cfg.image_h
                            )));
                        }
                        tokenizer.encode_multiscale(img, v, t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(per_view)
            }
            None => None,
        };
        let mut per_view: Vec<Vec<ScaleTokenMap>> = vec![Vec::new(); views];
        for k in 0..cfg.schedule.num_scales() {
            let source = match &given {
                Some(pv) => {
                    let maps: Vec<ScaleTokenMap> = pv.iter().map(|m| m[k].clone()).collect();
                    process_step(model, &mut cache, &geom, t, k, &conds, StepSource::Given(&maps))?
                }
                None => process_step(model, &mut cache, &geom, t, k, &conds, StepSource::Sample(sampler, &mut rng))?,
            };
            for (v, m) in source.maps.into_iter().enumerate() {
                per_view[v].push(m);
            }
        }
        cache.evict();
        let images = per_view
            .iter()
            .map(|maps| tokenizer.decode_from_scales(maps))
            .collect::<Result<Vec<_>>>()?;
        frames.push(RolloutFrame {
            time: geom.time,
            tokens: per_view,
            images,
            is_context: given.is_some(),
        });
    }
    Ok(Rollout {
        frames,
        retained: cache.frames(),
    })
}

pub const ROLLOUT_INDEX_HEADER: &str = "t_index,time_s,view,context,file";

/// Writes one binary PPM per frame and view plus `index.csv`.
pub fn write_rollout(dir: &Path, rollout: &Rollout) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut index = String::from(ROLLOUT_INDEX_HEADER);
    index.push('\n');
    let mut written = Vec::new();
    for (t, f) in rollout.frames.iter().enumerate() {
        for (v, img) in f.images.iter().enumerate() {
            let name = crate::toyworld::frame_file(t, v);
            let path = dir.join(&name);
            img.save_ppm(&path)?;
            let _ = writeln!(index, "{t},{:.6},{v},{},{name}", f.time, u8::from(f.is_context));
            written.push(path);
        }
    }
    let path = dir.join("index.csv");
    fs::write(&path, index)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(n: usize) -> Vec<ScaleTokenMap> {
        vec![ScaleTokenMap {
            view: 0,
            time_index: 0,
            scale: 0,
            h: 1,
            w: n,
            bits: 1,
            data: vec![1; n],
        }]
    }

    #[test]
    fn injection_extremes_and_rate() {
        let m = maps(100_000);
        assert_eq!(inject_bitwise_errors(&m, 0.0, 1).unwrap(), m);
        let all = inject_bitwise_errors(&m, 1.0, 1).unwrap();
        assert!(all[0].data.iter().all(|&b| b == -1));
        let some = inject_bitwise_errors(&m, 0.05, 7).unwrap();
        let flips = some[0].data.iter().filter(|&&b| b == -1).count() as f64 / 1e5;
        assert!((0.045..=0.055).contains(&flips), "{flips}");
        assert_eq!(some, inject_bitwise_errors(&m, 0.05, 7).unwrap());
        assert!(matches!(inject_bitwise_errors(&m, 1.5, 1), Err(Error::Config(_))));
        assert!(matches!(inject_bitwise_errors(&m, -0.1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn sampler_validation() {
        assert!(SamplerConfig::bernoulli(0.0, 1).validate().is_err());
        assert!(SamplerConfig::argmax().validate().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_bits(&[2.0f64, -0.5, 0.0], &SamplerConfig::argmax(), &mut rng), vec![1, -1, 1]);
        let hot = sample_bits(&[30.0f64; 64], &SamplerConfig::bernoulli(1.0, 0), &mut rng);
        assert!(hot.iter().all(|&b| b == 1));
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(RecurrentCache::<f64>::new(Some(0)).is_err());
    }
}
