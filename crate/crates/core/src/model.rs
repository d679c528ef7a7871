//! Dual-causal transformer over multi-view, multi-scale token sequences.
//!
//! Tokens are ordered by frame `t`, scale step `k`, view `v` and row-major
//! cell `(i, j)`. Every block runs image-wise self-attention (axial rotary),
//! a spatio-temporal module (global attention with the 7D ray rotary, or the
//! decoupled cross-view / cross-frame pair), image-wise cross-attention to
//! condition features, and an MLP.
//!
//! All passes go through [`forward_chunk`]: a chunk of new tokens attends to
//! itself under the masks and to a [`Memory`] of pre-projection latents from
//! earlier tokens. A whole clip with empty memory is the teacher-forced pass;
//! a single step with cached memory is incremental generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_conditions, init_condition_params, ConditionSet};
use crate::error::{Error, Result};
use crate::geometry::{token_ray, CameraPose, EgoPose, ExtendedRay};
use crate::nn::{fan_in_std, init_linear, init_mlp, linear, linear_nobias, mlp, LN_EPS};
use crate::rope::{ray_rotation, rope_axial_2d, RopeConfig, RotaryCode};
use crate::tensor::{Array, Graph, ParamStore, Real, SparseMask, Var};
use crate::tokenizer::{prefix_feature, ScaleSchedule, ScaleTokenMap};

/// Which past scale steps a step may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Causality {
    /// `(t', k')` with `t' ≤ t` and `k' ≤ k`.
    PrefixScales,
    /// Past frames at the same scale, plus the current frame's prefix.
    SameScale,
    /// Every scale of past frames, plus the current frame's prefix.
    AllScales,
}

impl Causality {
    pub const ALL: [Self; 3] = [Self::PrefixScales, Self::SameScale, Self::AllScales];

    pub fn name(self) -> &'static str {
        match self {
            Self::PrefixScales => "prefix_scales",
            Self::SameScale => "same_scale",
            Self::AllScales => "all_scales",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown causality variant `{s}`")))
    }

    /// Whether step `(t, k)` may attend to step `(t2, k2)`.
    pub fn admits(self, (t, k): (usize, usize), (t2, k2): (usize, usize)) -> bool {
        if t2 == t {
            return k2 <= k;
        }
        if t2 > t {
            return false;
        }
        match self {
            Self::PrefixScales => k2 <= k,
            Self::SameScale => k2 == k,
            Self::AllScales => true,
        }
    }
}

/// How information moves across views and frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatioTemporal {
    Global,
    Decoupled,
    None,
}

impl SpatioTemporal {
    pub const ALL: [Self; 3] = [Self::Global, Self::Decoupled, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Decoupled => "decoupled",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown spatio-temporal variant `{s}`")))
    }
}

/// Position information of the spatio-temporal module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionMode {
    /// Rotary code of each token's global ray applied to queries and keys.
    RelativeRay,
    /// Global ray embedded additively at the input, no rotary.
    AbsoluteRay,
    None,
}

impl PositionMode {
    pub const ALL: [Self; 3] = [Self::RelativeRay, Self::AbsoluteRay, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::RelativeRay => "relative_ray",
            Self::AbsoluteRay => "absolute_ray",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown position variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub schedule: ScaleSchedule,
    pub causality: Causality,
    pub spatio_temporal: SpatioTemporal,
    pub position: PositionMode,
    pub rope: RopeConfig,
    pub text_slots: usize,
    /// Sinusoid frequencies per ray coordinate in the input embedding.
    pub ray_freqs: usize,
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads of 32.
    pub fn toy(schedule: ScaleSchedule) -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            head_dim: 32,
            mlp_ratio: 4,
            schedule,
            causality: Causality::PrefixScales,
            spatio_temporal: SpatioTemporal::Global,
            position: PositionMode::RelativeRay,
            rope: RopeConfig::default(),
            text_slots: 1024,
            ray_freqs: 4,
        }
    }

    /// Reduced size used by the training experiments and tests.
    pub fn small(schedule: ScaleSchedule) -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 2,
            head_dim: 32,
            text_slots: 256,
            ..Self::toy(schedule)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers, heads and mlp ratio must be positive".into()));
        }
        if self.width != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "width {} ≠ heads {} × head dim {}",
                self.width, self.heads, self.head_dim
            )));
        }
        if self.head_dim % 16 != 0 {
            return Err(Error::Config(format!("head dim {} not divisible by 16", self.head_dim)));
        }
        if self.text_slots == 0 || self.ray_freqs == 0 {
            return Err(Error::Config("text slots and ray frequencies must be positive".into()));
        }
        self.rope.validate()?;
        ScaleSchedule::new(self.schedule.grids.clone(), self.schedule.bits).map(|_| ())
    }

    /// Modules whose keys come from other tokens, in block order.
    pub fn kv_modules(&self) -> Vec<AttnModule> {
        match self.spatio_temporal {
            SpatioTemporal::Global => vec![AttnModule::Image, AttnModule::Global],
            SpatioTemporal::Decoupled => vec![AttnModule::Image, AttnModule::CrossView, AttnModule::CrossFrame],
            SpatioTemporal::None => vec![AttnModule::Image],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttnModule {
    /// Same frame and view, earlier or equal scale steps.
    Image,
    /// Every admissible step of every view and frame.
    Global,
    /// Same frame, all views, earlier or equal scale steps.
    CrossView,
    /// Same view, scale and cell in admissible frames.
    CrossFrame,
}

impl AttnModule {
    fn key(self) -> &'static str {
        match self {
            Self::Image => "img",
            Self::Global => "glb",
            Self::CrossView => "xv",
            Self::CrossFrame => "xf",
        }
    }

    fn gated(self) -> bool {
        self != Self::Image
    }

    fn uses_ray_rotary(self) -> bool {
        self != Self::Image
    }
}

/// Camera geometry of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub time: f64,
    pub ego: EgoPose,
    pub poses: Vec<CameraPose>,
}

impl FrameGeometry {
    pub fn views(&self) -> usize {
        self.poses.len()
    }
}

/// One token's place in the sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMeta {
    pub t: usize,
    pub time: f64,
    pub k: usize,
    pub v: usize,
    pub i: usize,
    pub j: usize,
    pub grid: (usize, usize),
    /// Ray through the cell center in the global frame.
    pub ray: ExtendedRay,
    /// The same ray in the ego frame of its own timestep.
    pub local_ray: ExtendedRay,
}

impl TokenMeta {
    pub fn step(&self) -> (usize, usize) {
        (self.t, self.k)
    }
}

/// Contiguous token range of one `(t, k)` step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepBlock {
    pub t: usize,
    pub k: usize,
    pub start: usize,
    pub len: usize,
}

/// Ordered tokens of a clip and their step blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub tokens: Vec<TokenMeta>,
    pub steps: Vec<StepBlock>,
}

/// Tokens of step `(t, k)` of one frame, views outermost.
pub fn step_tokens(schedule: &ScaleSchedule, frame: &FrameGeometry, t: usize, k: usize) -> Result<Vec<TokenMeta>> {
    let grid = *schedule
        .grids
        .get(k)
        .ok_or_else(|| Error::Contract(format!("scale step {k} outside the schedule")))?;
    let mut out = Vec::with_capacity(frame.views() * grid.0 * grid.1);
    for (v, pose) in frame.poses.iter().enumerate() {
        for i in 0..grid.0 {
            for j in 0..grid.1 {
                let ray = token_ray(pose, grid, (i, j), frame.time)?;
                out.push(TokenMeta {
                    t,
                    time: frame.time,
                    k,
                    v,
                    i,
                    j,
                    grid,
                    ray,
                    local_ray: frame.ego.local_ray(pose, &ray),
                });
            }
        }
    }
    Ok(out)
}

impl SequenceLayout {
    /// Layout of `frames`, numbered from `first_t`.
    pub fn new(schedule: &ScaleSchedule, frames: &[FrameGeometry], first_t: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Contract("layout needs at least one frame".into()));
        }
        let views = frames[0].views();
        if views == 0 || frames.iter().any(|f| f.views() != views) {
            return Err(Error::Contract("every frame needs the same nonzero view count".into()));
        }
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        for (n, frame) in frames.iter().enumerate() {
            for k in 0..schedule.num_scales() {
                let toks = step_tokens(schedule, frame, first_t + n, k)?;
                steps.push(StepBlock {
                    t: first_t + n,
                    k,
                    start: tokens.len(),
                    len: toks.len(),
                });
                tokens.extend(toks);
            }
        }
        Ok(Self { tokens, steps })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn step_index(&self, t: usize, k: usize) -> Option<usize> {
        self.steps.iter().position(|s| s.t == t && s.k == k)
    }
}

/// Step-level admissibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMask {
    pub steps: Vec<(usize, usize)>,
    /// Row-major, `allowed[q * n + key]`.
    pub allowed: Vec<bool>,
}

impl StepMask {
    pub fn allows(&self, q: (usize, usize), key: (usize, usize)) -> bool {
        let n = self.steps.len();
        match (self.steps.iter().position(|&s| s == q), self.steps.iter().position(|&s| s == key)) {
            (Some(a), Some(b)) => self.allowed[a * n + b],
            _ => false,
        }
    }

    /// Text grid: one row per query step, `#` where the key step is admitted.
    /// Steps are labeled 1-based as `(t,k)`.
    pub fn to_text(&self) -> String {
        let n = self.steps.len();
        let label = |(t, k): (usize, usize)| format!("({},{})", t + 1, k + 1);
        let w = self.steps.iter().map(|&s| label(s).len()).max().unwrap_or(5);
        let mut out = format!("{:w$} ", "", w = w);
        for &s in &self.steps {
            let _ = write!(out, " {:>w$}", label(s), w = w);
        }
        out.push('\n');
        for (a, &q) in self.steps.iter().enumerate() {
            let _ = write!(out, "{:w$} ", label(q), w = w);
            for b in 0..n {
                let c = if self.allowed[a * n + b] { "#" } else { "." };
                let _ = write!(out, " {c:>w$}", w = w);
            }
            out.push('\n');
        }
        out
    }
}

/// Step-level mask of the global module for `layout`.
pub fn dual_causal_mask(layout: &SequenceLayout, variant: Causality) -> Result<StepMask> {
    if layout.steps.is_empty() {
        return Err(Error::Contract("empty layout".into()));
    }
    let steps: Vec<(usize, usize)> = layout.steps.iter().map(|s| (s.t, s.k)).collect();
    let n = steps.len();
    let mut allowed = vec![false; n * n];
    for a in 0..n {
        for b in 0..n {
            allowed[a * n + b] = variant.admits(steps[a], steps[b]);
        }
    }
    Ok(StepMask { steps, allowed })
}

/// Token-level admissibility for `module`. `window` limits how many past frames are visible.
pub fn module_admits(
    module: AttnModule,
    variant: Causality,
    window: Option<usize>,
    q: &TokenMeta,
    key: &TokenMeta,
) -> bool {
    if key.t > q.t || window.is_some_and(|m| q.t - key.t > m) {
        return false;
    }
    match module {
        AttnModule::Image => key.t == q.t && key.v == q.v && key.k <= q.k,
        AttnModule::Global => variant.admits(q.step(), key.step()),
        AttnModule::CrossView => key.t == q.t && key.k <= q.k,
        AttnModule::CrossFrame => {
            key.v == q.v && key.k == q.k && key.i == q.i && key.j == q.j && variant.admits(q.step(), key.step())
        }
    }
}

/// Pre-projection latents of earlier tokens for one module, per layer.
#[derive(Clone, Debug)]
pub struct KeyMemory<T> {
    pub tokens: Vec<TokenMeta>,
    pub latents: Vec<Rc<Array<T>>>,
}

impl<T: Real> KeyMemory<T> {
    pub fn empty(layers: usize, width: usize) -> Self {
        Self {
            tokens: Vec::new(),
            latents: (0..layers).map(|_| Rc::new(Array::zeros(&[0, width]))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Memory for every module of [`ModelConfig::kv_modules`], in that order.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub modules: Vec<KeyMemory<T>>,
}

impl<T: Real> Memory<T> {
    pub fn empty(cfg: &ModelConfig) -> Self {
        Self {
            modules: cfg
                .kv_modules()
                .iter()
                .map(|_| KeyMemory::empty(cfg.layers, cfg.width))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Past frames visible to each frame; `None` is unbounded.
    pub window: Option<usize>,
    /// Keys from other frames of the chunk use stop-gradient copies of their latents.
    pub detach_past: bool,
    /// Adds a zero-valued tracked probe before each stop-gradient copy, including
    /// the memory latents (which are then passed through a stop-gradient too).
    pub probe: bool,
}

/// Chunk of new tokens: layout order, prefix feature rows and per-frame conditions.
#[derive(Clone, Debug)]
pub struct ChunkInput {
    pub tokens: Vec<TokenMeta>,
    /// `[n, bits]`; rows of first-scale tokens are ignored (start embedding).
    pub prefix: Array<f64>,
    pub conditions: BTreeMap<usize, ConditionSet>,
}

pub struct ChunkOutput {
    /// `[n, bits]` bit logits.
    pub logits: Var,
    /// Pre-projection latents `[module][layer]`, `[n, width]` each.
    pub latents: Vec<Vec<Var>>,
    /// Probes added before stop-gradient copies (empty when unused).
    pub probes: Vec<Var>,
}

/// Learned parameters plus configuration.
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
        }
    }
}

fn ray_feature_dim(cfg: &ModelConfig, coords: usize) -> usize {
    coords * 2 * cfg.ray_freqs
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (w, bits) = (cfg.width, cfg.schedule.bits);
        init_linear(&mut p, "embed.in", bits + 1, w, fan_in_std(bits + 1), &mut rng);
        let rd = ray_feature_dim(&cfg, 6);
        init_linear(&mut p, "embed.ray", rd, w, fan_in_std(rd), &mut rng);
        if cfg.position == PositionMode::AbsoluteRay {
            let ad = ray_feature_dim(&cfg, 7);
            init_linear(&mut p, "embed.abs_ray", ad, w, fan_in_std(ad), &mut rng);
        }
        p.insert_normal("embed.step", &[cfg.schedule.num_scales(), w], 0.5, &mut rng);
        let out_std = 0.5 * fan_in_std(w);
        for l in 0..cfg.layers {
            for m in cfg.kv_modules() {
                let name = format!("l{l}.{}", m.key());
                for proj in ["q", "k", "v"] {
                    p.insert_normal(&format!("{name}.{proj}.w"), &[w, w], fan_in_std(w), &mut rng);
                }
                init_linear(&mut p, &format!("{name}.o"), w, w, out_std, &mut rng);
                if m.gated() {
                    p.insert_full(&format!("{name}.gate"), &[w], 0.0);
                }
            }
            let name = format!("l{l}.cross");
            for proj in ["q", "k", "v"] {
                p.insert_normal(&format!("{name}.{proj}.w"), &[w, w], fan_in_std(w), &mut rng);
            }
            init_linear(&mut p, &format!("{name}.o"), w, w, out_std, &mut rng);
            let hid = cfg.mlp_ratio * w;
            init_mlp(&mut p, &format!("l{l}.mlp"), (w, hid, w), 0.5 * fan_in_std(hid), &mut rng);
        }
        init_linear(&mut p, "head", w, bits, fan_in_std(w), &mut rng);
        init_condition_params(&mut p, w, cfg.text_slots, &mut rng);
        Ok(Self { cfg, params: p })
    }

    /// Wraps existing parameters after checking names and shapes against a fresh model.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "model expects {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (name, v) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != v.shape() {
                return Err(Error::Contract(format!("model parameter `{name}` has shape {:?}", got.shape())));
            }
        }
        Ok(Self { cfg, params })
    }
}

fn sinusoid(coords: &[f64], freqs: usize, out: &mut Vec<f64>) {
    for &c in coords {
        for f in 0..freqs {
            let a = c * (1u64 << f) as f64;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
}

/// Input latents: projected prefix features (start embedding at the first
/// scale), the local-ray embedding and the scale-step embedding.
pub fn embed_inputs<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    tokens: &[TokenMeta],
    prefix: &Array<f64>,
) -> Result<Var> {
    let (n, bits) = (tokens.len(), cfg.schedule.bits);
    if prefix.shape() != [n, bits] {
        return Err(Error::Contract(format!(
            "prefix features {:?} for {n} tokens of {bits} bits",
            prefix.shape()
        )));
    }
    let mut inp = Vec::with_capacity(n * (bits + 1));
    for (r, tok) in tokens.iter().enumerate() {
        if tok.k == 0 {
            inp.extend(std::iter::repeat_n(0.0, bits));
            inp.push(1.0);
        } else {
            inp.extend_from_slice(prefix.row(r));
            inp.push(0.0);
        }
    }
    let x = g.constant(Array::from_f64(&[n, bits + 1], &inp)?);
    let mut h = linear(g, p, "embed.in", x)?;

    let mut rf = Vec::with_capacity(n * ray_feature_dim(cfg, 6));
    for tok in tokens {
        let c = tok.local_ray.coords();
        sinusoid(&c[..6], cfg.ray_freqs, &mut rf);
    }
    let rf = g.constant(Array::from_f64(&[n, ray_feature_dim(cfg, 6)], &rf)?);
    let e = linear(g, p, "embed.ray", rf)?;
    h = g.add(h, e)?;

    if cfg.position == PositionMode::AbsoluteRay {
        let mut af = Vec::with_capacity(n * ray_feature_dim(cfg, 7));
        for tok in tokens {
            sinusoid(&tok.ray.coords(), cfg.ray_freqs, &mut af);
        }
        let af = g.constant(Array::from_f64(&[n, ray_feature_dim(cfg, 7)], &af)?);
        let e = linear(g, p, "embed.abs_ray", af)?;
        h = g.add(h, e)?;
    }

    let table = g.param_named(p, "embed.step")?;
    let ks: Vec<usize> = tokens.iter().map(|t| t.k).collect();
    let s = g.gather_rows(table, &ks)?;
    g.add(h, s)
}

type CosSin<T> = (Rc<Vec<T>>, Rc<Vec<T>>);

fn stack_codes<T: Real>(codes: impl Iterator<Item = Result<RotaryCode>>) -> Result<CosSin<T>> {
    let (mut c, mut s) = (Vec::new(), Vec::new());
    for code in codes {
        for a in code?.angles {
            c.push(T::lit(a.cos()));
            s.push(T::lit(a.sin()));
        }
    }
    Ok((Rc::new(c), Rc::new(s)))
}

fn axial_codes<T: Real>(cfg: &ModelConfig, tokens: &[TokenMeta]) -> Result<CosSin<T>> {
    stack_codes(tokens.iter().map(|t| {
        rope_axial_2d(
            t.i as f64 + 0.5,
            t.j as f64 + 0.5,
            t.grid.0 as f64,
            t.grid.1 as f64,
            &cfg.rope,
            cfg.head_dim,
        )
    }))
}

fn ray_codes<T: Real>(cfg: &ModelConfig, tokens: &[TokenMeta]) -> Result<CosSin<T>> {
    stack_codes(tokens.iter().map(|t| ray_rotation(&t.ray, &cfg.rope, cfg.head_dim)))
}

fn rotate<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, x: Var, codes: &CosSin<T>) -> Result<Var> {
    g.rotary(x, codes.0.clone(), codes.1.clone(), cfg.heads)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum KeyRegion {
    Memory,
    Detached,
    Live,
}

struct SelfAttnOut {
    x: Var,
    latent: Var,
    probes: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn self_attention<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    layer: usize,
    module: AttnModule,
    x: Var,
    tokens: &[TokenMeta],
    memory: &KeyMemory<T>,
    opts: &ForwardOptions,
) -> Result<SelfAttnOut> {
    let name = format!("l{layer}.{}", module.key());
    let h = g.layer_norm(x, LN_EPS);
    let mut parts = Vec::new();
    let mut metas: Vec<(KeyRegion, &TokenMeta)> = Vec::new();
    let mut probes = Vec::new();
    if !memory.is_empty() {
        let mut mem = g.constant_rc(memory.latents[layer].clone());
        if opts.probe {
            let pr = g.variable(Array::zeros(g.shape(mem)));
            probes.push(pr);
            let sum = g.add(mem, pr)?;
            mem = g.detach(sum);
        }
        parts.push(mem);
        metas.extend(memory.tokens.iter().map(|t| (KeyRegion::Memory, t)));
    }
    let split = opts.detach_past && module != AttnModule::Image;
    if split {
        let src = if opts.probe {
            let pr = g.variable(Array::zeros(g.shape(h)));
            probes.push(pr);
            g.add(h, pr)?
        } else {
            h
        };
        parts.push(g.detach(src));
        metas.extend(tokens.iter().map(|t| (KeyRegion::Detached, t)));
    }
    parts.push(h);
    metas.extend(tokens.iter().map(|t| (KeyRegion::Live, t)));
    let src = if parts.len() == 1 { h } else { g.concat_rows(&parts)? };

    let mask = SparseMask::from_fn(tokens.len(), metas.len(), |qi, ki| {
        let q = &tokens[qi];
        let (region, key) = metas[ki];
        let region_ok = match region {
            KeyRegion::Memory => true,
            KeyRegion::Detached => key.t != q.t,
            KeyRegion::Live => !split || key.t == q.t,
        };
        region_ok && module_admits(module, cfg.causality, opts.window, q, key)
    });

    let mut q = linear_nobias(g, p, &format!("{name}.q"), h)?;
    let mut k = linear_nobias(g, p, &format!("{name}.k"), src)?;
    let v = linear_nobias(g, p, &format!("{name}.v"), src)?;
    let key_tokens: Vec<TokenMeta> = metas.iter().map(|(_, t)| **t).collect();
    let rotary = match module {
        AttnModule::Image => Some((axial_codes(cfg, tokens)?, axial_codes(cfg, &key_tokens)?)),
        _ if module.uses_ray_rotary() && cfg.position == PositionMode::RelativeRay => {
            Some((ray_codes(cfg, tokens)?, ray_codes(cfg, &key_tokens)?))
        }
        _ => None,
    };
    if let Some((qc, kc)) = rotary {
        q = rotate(g, cfg, q, &qc)?;
        k = rotate(g, cfg, k, &kc)?;
    }
    let a = g.attention(q, k, v, Rc::new(mask), cfg.heads, 1.0 / (cfg.head_dim as f64).sqrt())?;
    let mut o = linear(g, p, &format!("{name}.o"), a)?;
    if module.gated() {
        let gate = g.param_named(p, &format!("{name}.gate"))?;
        o = g.mul_row(o, gate)?;
    }
    Ok(SelfAttnOut {
        x: g.add(x, o)?,
        latent: h,
        probes,
    })
}

/// Condition rows of every `(t, v)` image in the chunk with their owners and centers.
struct ConditionRows {
    rows: Option<Var>,
    owners: Vec<(usize, usize)>,
    codes: Option<CosSin<f64>>,
}

fn condition_rows<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    chunk: &ChunkInput,
) -> Result<ConditionRows> {
    let mut inputs = Vec::new();
    let mut owners = Vec::new();
    let frames: std::collections::BTreeSet<usize> = chunk.tokens.iter().map(|t| t.t).collect();
    for t in frames {
        if let Some(set) = chunk.conditions.get(&t) {
            for (v, list) in set.per_view.iter().enumerate() {
                for c in list {
                    inputs.push(c.clone());
                    owners.push((t, v));
                }
            }
        }
    }
    let rows = encode_conditions(g, p, &inputs)?;
    let codes = if inputs.is_empty() {
        None
    } else {
        Some(stack_codes(
            inputs
                .iter()
                .map(|c| rope_axial_2d(c.center[1], c.center[0], 1.0, 1.0, &cfg.rope, cfg.head_dim)),
        )?)
    };
    Ok(ConditionRows { rows, owners, codes })
}

fn cast_codes<T: Real>(c: &CosSin<f64>) -> CosSin<T> {
    (
        Rc::new(c.0.iter().map(|&v| T::lit(v)).collect()),
        Rc::new(c.1.iter().map(|&v| T::lit(v)).collect()),
    )
}

fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    layer: usize,
    x: Var,
    tokens: &[TokenMeta],
    conds: &ConditionRows,
) -> Result<Var> {
    let Some(rows) = conds.rows else {
        return Ok(x);
    };
    let name = format!("l{layer}.cross");
    let h = g.layer_norm(x, LN_EPS);
    let c = g.layer_norm(rows, LN_EPS);
    let q = linear_nobias(g, p, &format!("{name}.q"), h)?;
    let k = linear_nobias(g, p, &format!("{name}.k"), c)?;
    let v = linear_nobias(g, p, &format!("{name}.v"), c)?;
    let q = rotate(g, cfg, q, &axial_codes(cfg, tokens)?)?;
    let kc = cast_codes(conds.codes.as_ref().expect("codes exist with rows"));
    let k = rotate(g, cfg, k, &kc)?;
    let mask = SparseMask::from_fn(tokens.len(), conds.owners.len(), |qi, ki| {
        conds.owners[ki] == (tokens[qi].t, tokens[qi].v)
    });
    let a = g.attention(q, k, v, Rc::new(mask), cfg.heads, 1.0 / (cfg.head_dim as f64).sqrt())?;
    let o = linear(g, p, &format!("{name}.o"), a)?;
    g.add(x, o)
}

/// Runs the transformer on `chunk`, attending to `memory` for earlier tokens.
pub fn forward_chunk<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    chunk: &ChunkInput,
    memory: &Memory<T>,
    opts: &ForwardOptions,
) -> Result<ChunkOutput> {
    let modules = cfg.kv_modules();
    if memory.modules.len() != modules.len() {
        return Err(Error::Contract(format!(
            "memory has {} modules, model uses {}",
            memory.modules.len(),
            modules.len()
        )));
    }
    let mut x = embed_inputs(g, cfg, p, &chunk.tokens, &chunk.prefix)?;
    let conds = condition_rows(g, cfg, p, chunk)?;
    let mut latents = vec![Vec::with_capacity(cfg.layers); modules.len()];
    let mut probes = Vec::new();
    for layer in 0..cfg.layers {
        for (mi, &m) in modules.iter().enumerate() {
            let out = self_attention(g, cfg, p, layer, m, x, &chunk.tokens, &memory.modules[mi], opts)?;
            x = out.x;
            latents[mi].push(out.latent);
            probes.extend(out.probes);
        }
        x = cross_attention(g, cfg, p, layer, x, &chunk.tokens, &conds)?;
        let h = g.layer_norm(x, LN_EPS);
        let m = mlp(g, p, &format!("l{layer}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    let h = g.layer_norm(x, LN_EPS);
    let logits = linear(g, p, "head", h)?;
    Ok(ChunkOutput {
        logits,
        latents,
        probes,
    })
}

/// Tokens of a clip: `tokens[t][v][k]`.
pub type ClipTokens = Vec<Vec<Vec<ScaleTokenMap>>>;

/// A tokenized clip with geometry and conditions.
#[derive(Clone, Debug)]
pub struct Clip {
    pub frames: Vec<FrameGeometry>,
    pub tokens: ClipTokens,
    pub conditions: Vec<ConditionSet>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.tokens.len() != self.frames.len() || self.conditions.len() != self.frames.len() {
            return Err(Error::Contract("clip frames, tokens and conditions differ in length".into()));
        }
        for (f, per_view) in self.frames.iter().zip(&self.tokens) {
            if per_view.len() != f.views() {
                return Err(Error::Contract("token views differ from camera views".into()));
            }
            for maps in per_view {
                if maps.len() != schedule.num_scales() {
                    return Err(Error::Contract(format!("{} scale maps, schedule has {}", maps.len(), schedule.num_scales())));
                }
                for (k, m) in maps.iter().enumerate() {
                    if (m.h, m.w) != schedule.grids[k] || m.bits != schedule.bits {
                        return Err(Error::Contract(format!("scale {k} map is {}×{}×{}", m.h, m.w, m.bits)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Frames `range` as a clip with its own indices starting at 0.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            frames: self.frames[range.clone()].to_vec(),
            tokens: self.tokens[range.clone()].to_vec(),
            conditions: self.conditions[range].to_vec(),
        }
    }
}

/// Prefix feature rows for `tokens` (layout order) from the maps of `clip_tokens`,
/// where `clip_tokens[t - first_t]` holds frame `t`.
pub fn prefix_rows(
    schedule: &ScaleSchedule,
    tokens: &[TokenMeta],
    clip_tokens: &[Vec<Vec<ScaleTokenMap>>],
    first_t: usize,
) -> Result<Array<f64>> {
    let bits = schedule.bits;
    let mut data = Vec::with_capacity(tokens.len() * bits);
    let mut cache: BTreeMap<(usize, usize, usize), Array<f64>> = BTreeMap::new();
    for tok in tokens {
        if tok.k == 0 {
            data.extend(std::iter::repeat_n(0.0, bits));
            continue;
        }
        let key = (tok.t, tok.v, tok.k);
        if !cache.contains_key(&key) {
            let maps = clip_tokens
                .get(tok.t - first_t)
                .and_then(|f| f.get(tok.v))
                .ok_or_else(|| Error::Contract(format!("no tokens for frame {} view {}", tok.t, tok.v)))?;
            cache.insert(key, prefix_feature(&maps[..tok.k], schedule)?);
        }
        let f = &cache[&key];
        data.extend_from_slice(f.row(tok.i * tok.grid.1 + tok.j));
    }
    Array::new(vec![tokens.len(), bits], data)
}

/// Target bits in `{0, 1}` for `tokens` (layout order).
pub fn target_bits(tokens: &[TokenMeta], clip_tokens: &[Vec<Vec<ScaleTokenMap>>], first_t: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for tok in tokens {
        let m = clip_tokens
            .get(tok.t - first_t)
            .and_then(|f| f.get(tok.v))
            .and_then(|v| v.get(tok.k))
            .ok_or_else(|| Error::Contract(format!("no tokens for step ({}, {}) view {}", tok.t, tok.k, tok.v)))?;
        let cell = tok.i * tok.grid.1 + tok.j;
        out.extend(m.data[cell * m.bits..(cell + 1) * m.bits].iter().map(|&b| if b > 0 { 1.0 } else { 0.0 }));
    }
    Ok(out)
}

/// Chunk covering all frames of `clip`, with prefix features from `input_tokens`
/// (which may be error-injected copies of the clip tokens).
pub fn clip_chunk(schedule: &ScaleSchedule, clip: &Clip, input_tokens: &ClipTokens) -> Result<(SequenceLayout, ChunkInput)> {
    clip.validate(schedule)?;
    let layout = SequenceLayout::new(schedule, &clip.frames, 0)?;
    let prefix = prefix_rows(schedule, &layout.tokens, input_tokens, 0)?;
    let conditions = clip.conditions.iter().cloned().enumerate().collect();
    let chunk = ChunkInput {
        tokens: layout.tokens.clone(),
        prefix,
        conditions,
    };
    Ok((layout, chunk))
}

/// One masked pass over the whole clip with teacher-forced inputs.
pub fn forward_teacher_forced<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    clip: &Clip,
    input_tokens: &ClipTokens,
    opts: &ForwardOptions,
) -> Result<(SequenceLayout, ChunkOutput)> {
    let (layout, chunk) = clip_chunk(&cfg.schedule, clip, input_tokens)?;
    let out = forward_chunk(g, cfg, p, &chunk, &Memory::empty(cfg), opts)?;
    Ok((layout, out))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::geometry::{dot, mat_t_vec};
    use crate::rope::apply_rotary;
    use crate::toyworld::RigSpec;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            width: 32,
            heads: 2,
            head_dim: 16,
            mlp_ratio: 2,
            text_slots: 16,
            ..ModelConfig::toy(ScaleSchedule::new(vec![(1, 1), (2, 2)], 4).unwrap())
        }
    }

    fn frames(n: usize, views: usize) -> Vec<FrameGeometry> {
        let rig = if views == 2 {
            RigSpec::two_view(8, 8)
        } else {
            RigSpec::three_view(8, 8)
        };
        (0..n)
            .map(|t| {
                let ego = EgoPose {
                    position: [t as f64 * 1.5, 0.2 * t as f64, 0.0],
                    yaw: 0.1 * t as f64,
                };
                FrameGeometry {
                    time: 0.4 * t as f64,
                    ego,
                    poses: (0..views).map(|v| rig.camera_pose(v, &ego)).collect(),
                }
            })
            .collect()
    }

    fn random_clip(cfg: &ModelConfig, n: usize, views: usize, rng: &mut ChaCha8Rng) -> Clip {
        let sched = &cfg.schedule;
        let tokens = (0..n)
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
                                    data: (0..h * w * sched.bits)
                                        .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                                        .collect(),
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Clip {
            frames: frames(n, views),
            tokens,
            conditions: vec![ConditionSet::empty(views); n],
        }
    }

    fn open_gates(model: &mut Model<f64>, rng: &mut ChaCha8Rng) {
        let names: Vec<String> = model.params.names().iter().filter(|n| n.ends_with(".gate")).cloned().collect();
        for n in names {
            let id = model.params.id(&n).unwrap();
            for v in model.params.value_mut(id).data_mut() {
                *v = rng.gen_range(0.5..1.5);
            }
        }
    }

    #[test]
    fn mask_enumeration_examples() {
        let sched = ScaleSchedule::new(vec![(1, 1), (2, 2)], 4).unwrap();
        let single = SequenceLayout::new(&ScaleSchedule::new(vec![(1, 1)], 4).unwrap(), &frames(1, 2), 0).unwrap();
        let m = dual_causal_mask(&single, Causality::PrefixScales).unwrap();
        assert_eq!(m.allowed, vec![true]);
        let layout = SequenceLayout::new(&sched, &frames(2, 2), 0).unwrap();
        let m = dual_causal_mask(&layout, Causality::PrefixScales).unwrap();
        // 0-based (t, k): step (2,1) ↔ (1,0), step (2,2) ↔ (1,1).
        let attended = |m: &StepMask, q| -> Vec<(usize, usize)> { m.steps.iter().copied().filter(|&s| m.allows(q, s)).collect() };
        assert_eq!(attended(&m, (1, 0)), vec![(0, 0), (1, 0)]);
        assert_eq!(attended(&m, (1, 1)), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let all = dual_causal_mask(&layout, Causality::AllScales).unwrap();
        assert_eq!(attended(&all, (1, 0)), vec![(0, 0), (0, 1), (1, 0)]);
        let same = dual_causal_mask(&layout, Causality::SameScale).unwrap();
        assert_eq!(attended(&same, (1, 1)), vec![(0, 1), (1, 0), (1, 1)]);
        assert!(Causality::parse("bogus").is_err());
        assert!(m.to_text().contains('#'));
    }

    #[test]
    fn layout_order_and_block_sizes() {
        let sched = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)], 4).unwrap();
        let layout = SequenceLayout::new(&sched, &frames(2, 3), 0).unwrap();
        assert_eq!(layout.steps.len(), 6);
        for s in &layout.steps {
            let (h, w) = sched.grids[s.k];
            assert_eq!(s.len, 3 * h * w);
        }
        let keys: Vec<(usize, usize, usize, usize, usize)> =
            layout.tokens.iter().map(|t| (t.t, t.k, t.v, t.i, t.j)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn local_embedding_disambiguates_views_and_is_frame_local() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let rig = RigSpec::two_view(8, 8);
        let mk = |ego: EgoPose, time: f64| FrameGeometry {
            time,
            ego,
            poses: vec![rig.camera_pose(0, &ego), rig.camera_pose(1, &ego)],
        };
        let f0 = mk(EgoPose { position: [0.0; 3], yaw: 0.0 }, 0.0);
        let f1 = mk(EgoPose { position: [5.0, 1.0, 0.0], yaw: 0.0 }, 0.7);
        let toks: Vec<TokenMeta> = [step_tokens(&cfg.schedule, &f0, 0, 1).unwrap(), step_tokens(&cfg.schedule, &f1, 1, 1).unwrap()].concat();
        let prefix = Array::zeros(&[toks.len(), cfg.schedule.bits]);
        let mut g = Graph::new();
        let e = embed_inputs(&mut g, &cfg, &model.params, &toks, &prefix).unwrap();
        let e = g.value(e);
        // Views 0/1 of frame 0: same cell, different embeddings.
        assert_ne!(e.row(0), e.row(4));
        // Frame 1 under pure translation: identical embeddings to frame 0.
        for r in 0..8 {
            let (a, b) = (e.row(r), e.row(8 + r));
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12), "row {r}");
        }
    }

    #[test]
    fn start_step_ignores_prefix_values() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let f = &frames(1, 2)[0];
        let toks = step_tokens(&cfg.schedule, f, 0, 0).unwrap();
        let mut g = Graph::new();
        let a = embed_inputs(&mut g, &cfg, &model.params, &toks, &Array::zeros(&[2, 4])).unwrap();
        let b = embed_inputs(&mut g, &cfg, &model.params, &toks, &Array::full(&[2, 4], 0.7)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn fresh_global_module_contributes_zero() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let clip = random_clip(&cfg, 2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let (_, a) = forward_teacher_forced(&mut g, &cfg, &model.params, &clip, &clip.tokens, &ForwardOptions::default()).unwrap();
        let none_cfg = ModelConfig {
            spatio_temporal: SpatioTemporal::None,
            ..cfg.clone()
        };
        // Same parameters minus the global module.
        let mut none_params = ParamStore::new();
        for (name, v) in model.params.iter() {
            if !name.contains(".glb.") {
                none_params.insert(name, v.clone());
            }
        }
        let none = Model::from_params(none_cfg.clone(), none_params).unwrap();
        let (_, b) = forward_teacher_forced(&mut g, &none_cfg, &none.params, &clip, &clip.tokens, &ForwardOptions::default()).unwrap();
        assert_eq!(g.value(a.logits), g.value(b.logits));
    }

    #[test]
    fn image_attention_isolates_frames() {
        let cfg = ModelConfig {
            spatio_temporal: SpatioTemporal::None,
            ..tiny_cfg()
        };
        let model = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let mut clip = random_clip(&cfg, 2, 2, &mut ChaCha8Rng::seed_from_u64(2));
        // Frame 1 gets frame 0's tokens and ego-relative geometry.
        clip.tokens[1] = clip.tokens[0].clone();
        let shift = EgoPose {
            position: [3.0, 0.0, 0.0],
            yaw: 0.0,
        };
        let rig = RigSpec::two_view(8, 8);
        clip.frames[0] = FrameGeometry {
            time: 0.0,
            ego: EgoPose {
                position: [0.0; 3],
                yaw: 0.0,
            },
            poses: vec![rig.camera_pose(0, &EgoPose { position: [0.0; 3], yaw: 0.0 }), rig.camera_pose(1, &EgoPose { position: [0.0; 3], yaw: 0.0 })],
        };
        clip.frames[1] = FrameGeometry {
            time: 0.5,
            ego: shift,
            poses: vec![rig.camera_pose(0, &shift), rig.camera_pose(1, &shift)],
        };
        let mut g = Graph::new();
        let (layout, out) = forward_teacher_forced(&mut g, &cfg, &model.params, &clip, &clip.tokens, &ForwardOptions::default()).unwrap();
        let l = g.value(out.logits);
        let half = layout.len() / 2;
        for r in 0..half {
            let (a, b) = (l.row(r), l.row(half + r));
            assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    /// Dense oracle for one attention module with explicit rotation matrices.
    fn dense_oracle(
        x: &Array<f64>,
        wq: &Array<f64>,
        wk: &Array<f64>,
        wv: &Array<f64>,
        heads: usize,
        codes: &[RotaryCode],
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Array<f64> {
        let n = x.rows();
        let w = x.cols();
        let d = w / heads;
        let q = x.matmul(wq).unwrap();
        let k = x.matmul(wk).unwrap();
        let v = x.matmul(wv).unwrap();
        let mut out = Array::zeros(&[n, w]);
        for h in 0..heads {
            let rot = |m: &Array<f64>, r: usize| -> Vec<f64> {
                let seg = &m.row(r)[h * d..(h + 1) * d];
                let dense = codes[r].to_dense();
                (0..d).map(|a| (0..d).map(|b| dense[a][b] * seg[b]).sum()).collect()
            };
            for i in 0..n {
                let qi = rot(&q, i);
                let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let kj = rot(&k, j);
                        qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for (&j, l) in keys.iter().zip(&logits) {
                    let wgt = (l - mx).exp() / z;
                    for c in 0..d {
                        out.data_mut()[i * w + h * d + c] += wgt * v.row(j)[h * d + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn global_and_image_attention_match_dense_oracle() {
        for module in [AttnModule::Global, AttnModule::Image] {
            let cfg = tiny_cfg();
            let mut model = Model::<f64>::new(cfg.clone(), 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            open_gates(&mut model, &mut rng);
            let layout = SequenceLayout::new(&cfg.schedule, &frames(2, 2), 0).unwrap();
            let n = layout.len();
            let x0 = Array::from_fn(&[n, cfg.width], |_| rng.gen_range(-1.0..1.0));
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let out = self_attention(&mut g, &cfg, &model.params, 0, module, x, &layout.tokens, &KeyMemory::empty(1, cfg.width), &ForwardOptions::default()).unwrap();
            let h = g.value(out.latent).clone();
            let codes: Vec<RotaryCode> = layout
                .tokens
                .iter()
                .map(|t| match module {
                    AttnModule::Image => rope_axial_2d(t.i as f64 + 0.5, t.j as f64 + 0.5, t.grid.0 as f64, t.grid.1 as f64, &cfg.rope, 16).unwrap(),
                    _ => ray_rotation(&t.ray, &cfg.rope, 16).unwrap(),
                })
                .collect();
            let name = format!("l0.{}", module.key());
            let get = |s: &str| model.params.get(&format!("{name}.{s}")).unwrap().clone();
            let attn = dense_oracle(&h, &get("q.w"), &get("k.w"), &get("v.w"), 2, &codes, |i, j| {
                module_admits(module, cfg.causality, None, &layout.tokens[i], &layout.tokens[j])
            });
            let mut o = attn.matmul(&get("o.w")).unwrap();
            let b = get("o.b");
            let gate = if module.gated() { Some(get("gate")) } else { None };
            for (idx, v) in o.data_mut().iter_mut().enumerate() {
                let c = idx % cfg.width;
                *v += b.data()[c];
                if let Some(gt) = &gate {
                    *v *= gt.data()[c];
                }
            }
            let got = g.value(out.x);
            for (idx, (&a, &b)) in got.data().iter().zip(o.data()).enumerate() {
                let expect = x0.data()[idx] + b;
                assert!((a - expect).abs() < 1e-5, "{module:?} {idx}: {a} vs {expect}");
            }
        }
    }

    #[test]
    fn global_logits_invariant_to_common_moment_offset() {
        // ⟨R_i q, R_j k⟩ depends only on coordinate differences.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = SequenceLayout::new(&cfg.schedule, &frames(2, 2), 0).unwrap();
        let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offset = [3.0, -2.0, 0.5];
        for a in &layout.tokens {
            for b in layout.tokens.iter().step_by(3) {
                let logit = |ra: &ExtendedRay, rb: &ExtendedRay| {
                    let qa = apply_rotary(&ray_rotation(ra, &cfg.rope, 16).unwrap(), &q).unwrap();
                    let kb = apply_rotary(&ray_rotation(rb, &cfg.rope, 16).unwrap(), &k).unwrap();
                    qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>()
                };
                let shift = |r: &ExtendedRay| ExtendedRay {
                    m: [r.m[0] + offset[0], r.m[1] + offset[1], r.m[2] + offset[2]],
                    ..*r
                };
                assert!((logit(&a.ray, &b.ray) - logit(&shift(&a.ray), &shift(&b.ray))).abs() < 1e-5);
            }
        }
        // Sanity: a local ray keeps its direction relative to the ego heading.
        let t = &layout.tokens[layout.len() - 1];
        let f = &frames(2, 2)[1];
        let back = mat_t_vec(&f.ego.rotation(), t.ray.d);
        assert!((dot(back, t.local_ray.d) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_causality_examples() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        open_gates(&mut model, &mut rng);
        let clip = random_clip(&cfg, 2, 2, &mut rng);
        let run = |tokens: &ClipTokens| {
            let mut g = Graph::new();
            let (layout, out) = forward_teacher_forced(&mut g, &cfg, &model.params, &clip, tokens, &ForwardOptions::default()).unwrap();
            (layout, g.value(out.logits).clone())
        };
        let (layout, base) = run(&clip.tokens);
        // Flip the finest scale of frame 0: feeds only (0, K) inputs, which none of the
        // first-scale steps see; frame 1's first step must be unchanged.
        let mut pert = clip.tokens.clone();
        for v in 0..2 {
            for b in pert[0][v][1].data.iter_mut() {
                *b = -*b;
            }
        }
        // The finest map only feeds prefixes of later steps of the same image, which
        // do not exist for K = 2: all logits stay.
        let (_, after) = run(&pert);
        assert_eq!(base, after);
        // Flip the first scale of frame 1: frame 0 logits unchanged.
        let mut pert = clip.tokens.clone();
        for b in pert[1][0][0].data.iter_mut() {
            *b = -*b;
        }
        let (_, after) = run(&pert);
        let s = layout.steps[layout.step_index(1, 0).unwrap()];
        for r in 0..s.start {
            assert_eq!(base.row(r), after.row(r));
        }
        assert_ne!(base.row(layout.steps[layout.step_index(1, 1).unwrap()].start), after.row(layout.steps[layout.step_index(1, 1).unwrap()].start));
    }

    #[test]
    fn empty_conditions_are_identity_and_frames_isolated() {
        use crate::conditioning::encode_text;
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let clip = random_clip(&cfg, 2, 2, &mut rng);
        let layout = SequenceLayout::new(&cfg.schedule, &clip.frames, 0).unwrap();
        let x0 = Array::from_fn(&[layout.len(), cfg.width], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let mk_chunk = |conditions: BTreeMap<usize, ConditionSet>| ChunkInput {
            tokens: layout.tokens.clone(),
            prefix: Array::zeros(&[layout.len(), 4]),
            conditions,
        };
        let empty = mk_chunk(BTreeMap::new());
        let rows = condition_rows(&mut g, &cfg, &model.params, &empty).unwrap();
        let y = cross_attention(&mut g, &cfg, &model.params, 0, x, &layout.tokens, &rows).unwrap();
        assert_eq!(g.value(y), &x0);
        // Text on frame 1 only: frame 0 rows unchanged, frame 1 rows changed.
        let mut set = ConditionSet::empty(2);
        set.per_view[0] = encode_text("red cube", 16);
        let with = mk_chunk([(1, set)].into_iter().collect());
        let rows = condition_rows(&mut g, &cfg, &model.params, &with).unwrap();
        let y = cross_attention(&mut g, &cfg, &model.params, 0, x, &layout.tokens, &rows).unwrap();
        let yv = g.value(y);
        for (r, t) in layout.tokens.iter().enumerate() {
            let same = yv.row(r) == x0.row(r);
            assert_eq!(same, !(t.t == 1 && t.v == 0), "token {r}");
        }
    }

    #[test]
    fn box_centered_on_token_gets_maximal_alignment() {
        // Axial codes: identical features, one at the token's own position.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (i, j, grid) = (1usize, 0usize, 2usize);
        let tok = rope_axial_2d(i as f64 + 0.5, j as f64 + 0.5, grid as f64, grid as f64, &cfg.rope, 16).unwrap();
        let at = |y: f64, x: f64| {
            let c = rope_axial_2d(y, x, 1.0, 1.0, &cfg.rope, 16).unwrap();
            let a = apply_rotary(&tok, &q).unwrap();
            let b = apply_rotary(&c, &q).unwrap();
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        let own = at((i as f64 + 0.5) / grid as f64, (j as f64 + 0.5) / grid as f64);
        let far = at(0.1, 0.9);
        assert!((own - q.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-9);
        assert!(own > far);
    }

    #[test]
    fn outputs_finite_for_large_inputs() {
        let cfg = tiny_cfg();
        let mut model = Model::<f64>::new(cfg.clone(), 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        open_gates(&mut model, &mut rng);
        let clip = random_clip(&cfg, 2, 2, &mut rng);
        let (_, mut chunk) = clip_chunk(&cfg.schedule, &clip, &clip.tokens).unwrap();
        chunk.prefix = chunk.prefix.map(|v| v * 1000.0);
        let mut g = Graph::new();
        let out = forward_chunk(&mut g, &cfg, &model.params, &chunk, &Memory::empty(&cfg), &ForwardOptions::default()).unwrap();
        assert!(g.value(out.logits).all_finite());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.head_dim = 8;
        cfg.width = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.width = 40;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::toy(ScaleSchedule::toy16()).validate().is_ok());
    }
}
