//! Bitwise cross-entropy training: teacher-forced clips and recurrent long sequences.
//!
//! The clip step runs one masked pass over whole clips. The recurrent step
//! walks a long sequence frame by frame: each frame attends to stop-gradient
//! latents of at most `cache` earlier frames, is backpropagated on its own,
//! and the accumulated gradient drives a single update at the end.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::engine::inject_bitwise_errors_with;
use crate::error::{Error, Result};
use crate::model::{
    clip_chunk, forward_chunk, prefix_rows, step_tokens, target_bits, AttnModule, Causality, ChunkInput, ChunkOutput, Clip,
    ClipTokens, ForwardOptions, KeyMemory, Memory, Model, ModelConfig, PositionMode, SpatioTemporal, StepBlock,
    TokenMeta,
};
use crate::tensor::{accumulate, clip_grad_norm, AdamW, Array, Graph, ParamStore, Real, Var};
use crate::tokenizer::ScaleTokenMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Clip,
    Recurrent,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clip => "clip",
            Self::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Self::Clip),
            "recurrent" => Ok(Self::Recurrent),
            _ => Err(Error::Config(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Frames per training sequence.
    pub clip_len: usize,
    /// Past frames visible to each frame in recurrent training and rollouts.
    pub cache: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` at the end of the cosine decay.
    pub lr_floor: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub error_rate: f64,
    /// Range of the time between consecutive frames, seconds.
    pub interval: (f64, f64),
    pub seed: u64,
    pub causality: Causality,
    pub spatio_temporal: SpatioTemporal,
    pub position: PositionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Clip,
            clip_len: 4,
            cache: 4,
            batch: 4,
            steps: 1000,
            lr: 1e-3,
            lr_floor: 0.1,
            warmup: 50,
            weight_decay: 0.01,
            grad_clip: 1.0,
            error_rate: 0.05,
            interval: (0.3, 0.7),
            seed: 0,
            causality: Causality::PrefixScales,
            spatio_temporal: SpatioTemporal::Global,
            position: PositionMode::RelativeRay,
        }
    }
}

/// Lines of `key = value`; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{}`", n + 1, k.trim())));
        }
    }
    Ok(out)
}

pub fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "stage",
        "clip_len",
        "cache",
        "batch",
        "steps",
        "lr",
        "lr_floor",
        "warmup",
        "weight_decay",
        "grad_clip",
        "error_rate",
        "interval_min",
        "interval_max",
        "seed",
        "variant",
        "st",
        "pos",
    ];

    /// Applies one key; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "stage" => self.stage = Stage::parse(v)?,
            "clip_len" => self.clip_len = parse_value(key, v)?,
            "cache" => self.cache = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_floor" => self.lr_floor = parse_value(key, v)?,
            "warmup" => self.warmup = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "grad_clip" => self.grad_clip = parse_value(key, v)?,
            "error_rate" => self.error_rate = parse_value(key, v)?,
            "interval_min" => self.interval.0 = parse_value(key, v)?,
            "interval_max" => self.interval.1 = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "variant" => self.causality = Causality::parse(v)?,
            "st" => self.spatio_temporal = SpatioTemporal::parse(v)?,
            "pos" => self.position = PositionMode::parse(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a key-value file; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(Error::Config(format!("unknown training key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "stage = {}\nclip_len = {}\ncache = {}\nbatch = {}\nsteps = {}\nlr = {}\nlr_floor = {}\nwarmup = {}\n\
             weight_decay = {}\ngrad_clip = {}\nerror_rate = {}\ninterval_min = {}\ninterval_max = {}\nseed = {}\n\
             variant = {}\nst = {}\npos = {}\n",
            self.stage.name(),
            self.clip_len,
            self.cache,
            self.batch,
            self.steps,
            self.lr,
            self.lr_floor,
            self.warmup,
            self.weight_decay,
            self.grad_clip,
            self.error_rate,
            self.interval.0,
            self.interval.1,
            self.seed,
            self.causality.name(),
            self.spatio_temporal.name(),
            self.position.name(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_len == 0 || self.cache == 0 || self.batch == 0 {
            return Err(Error::Config("clip length, cache and batch must be at least 1".into()));
        }
        if !(self.interval.0 > 0.0 && self.interval.1 >= self.interval.0 && self.interval.1.is_finite()) {
            return Err(Error::Config(format!("invalid frame interval range {:?}", self.interval)));
        }
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(Error::Config(format!("error rate {} outside [0, 1]", self.error_rate)));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0 && (0.0..=1.0).contains(&self.lr_floor)) {
            return Err(Error::Config("learning rate, clip norm and floor out of range".into()));
        }
        Ok(())
    }

    /// Copies the ablation variants into `model`.
    pub fn apply_variants(&self, model: &mut ModelConfig) {
        model.causality = self.causality;
        model.spatio_temporal = self.spatio_temporal;
        model.position = self.position;
    }

    /// Linear warmup, then cosine decay to `lr · lr_floor`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 {
            ((step + 1) as f64 / self.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let progress = if self.steps > 1 {
            (step as f64 / (self.steps - 1) as f64).min(1.0)
        } else {
            0.0
        };
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * warm * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: usize,
    /// Sum over `(t, k)` steps of the per-step mean bit cross-entropy, averaged over sequences.
    pub loss: f64,
    pub bit_accuracy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

impl fmt::Display for TrainStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} loss {:.5} bit_acc {:.4} grad_norm {:.4} ({:.2}s)",
            self.step, self.loss, self.bit_accuracy, self.grad_norm, self.seconds
        )
    }
}

/// Wall time is left out so that reruns with the same seed write identical files.
pub const STATS_HEADER: &str = "step,loss,bit_accuracy,grad_norm";

/// Appends [`TrainStats`] rows to a CSV file, writing the header once.
pub struct StatsLog {
    path: PathBuf,
}

impl StatsLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, format!("{STATS_HEADER}\n"))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn append(&self, s: &TrainStats) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{},{:.6},{:.6},{:.6}", s.step, s.loss, s.bit_accuracy, s.grad_norm)?;
        Ok(())
    }
}

/// Mean binary cross-entropy of `logits` `[cells, bits]` against ±1 `target` bits.
pub fn bit_cross_entropy<T: Real>(logits: &Array<T>, target: &ScaleTokenMap) -> Result<f64> {
    if logits.shape() != [target.cells(), target.bits] || !target.is_binary() {
        return Err(Error::Contract(format!(
            "logits {:?} against a {}×{}×{} token map",
            logits.shape(),
            target.h,
            target.w,
            target.bits
        )));
    }
    let n = logits.len() as f64;
    Ok(logits
        .data()
        .iter()
        .zip(&target.data)
        .map(|(&z, &b)| {
            let z = z.f64();
            let y = if b > 0 { 1.0 } else { 0.0 };
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / n)
}

/// Sum over steps of the per-step mean BCE, plus correct and total bit counts.
fn steps_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    steps: &[StepBlock],
    targets: &[f64],
    bits: usize,
) -> Result<(Var, usize, usize)> {
    let mut total: Option<Var> = None;
    let base = steps.first().map_or(0, |s| s.start);
    for s in steps {
        let z = g.slice_rows(logits, s.start - base, s.len)?;
        let tgt: Vec<T> = targets[(s.start - base) * bits..(s.start - base + s.len) * bits]
            .iter()
            .map(|&y| T::lit(y))
            .collect();
        let l = g.bce_with_logits(z, &tgt)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let correct = g
        .value(logits)
        .data()
        .iter()
        .zip(targets)
        .filter(|(&z, &y)| (z.f64() >= 0.0) == (y > 0.5))
        .count();
    let total = total.ok_or_else(|| Error::Contract("no steps to score".into()))?;
    Ok((total, correct, targets.len()))
}

/// Copies of the clip tokens with each bit flipped with probability `rate`.
pub fn corrupt_tokens(tokens: &ClipTokens, rate: f64, rng: &mut impl Rng) -> Result<ClipTokens> {
    tokens
        .iter()
        .map(|views| {
            views
                .iter()
                .map(|maps| inject_bitwise_errors_with(maps, rate, rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Loss and parameter gradients of one sequence.
pub struct SequenceGrad<T> {
    pub loss: f64,
    pub correct: usize,
    pub bits: usize,
    pub grads: Vec<Array<T>>,
    /// Gradients of the stop-gradient probes (empty unless requested).
    pub probe_grads: Vec<Array<T>>,
}

/// Teacher-forced training loss of one clip built on `g` with parameters `p`,
/// plus the forward outputs and the correct and total bit counts.
pub fn clip_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &ParamStore<T>,
    clip: &Clip,
    inputs: &ClipTokens,
    opts: &ForwardOptions,
) -> Result<(Var, ChunkOutput, usize, usize)> {
    let (layout, chunk) = clip_chunk(&cfg.schedule, clip, inputs)?;
    let targets = target_bits(&layout.tokens, &clip.tokens, 0)?;
    let out = forward_chunk(g, cfg, p, &chunk, &Memory::empty(cfg), opts)?;
    let (loss, correct, bits) = steps_loss(g, out.logits, &layout.steps, &targets, cfg.schedule.bits)?;
    Ok((loss, out, correct, bits))
}

/// Teacher-forced gradients of one clip with inputs from `inputs`.
pub fn clip_gradients<T: Real>(model: &Model<T>, clip: &Clip, inputs: &ClipTokens, opts: &ForwardOptions) -> Result<SequenceGrad<T>> {
    let mut g = Graph::new();
    let (loss, out, correct, bits) = clip_loss(&mut g, &model.cfg, &model.params, clip, inputs, opts)?;
    let value = g.value(loss).item().f64();
    let back = g.backward(loss)?;
    Ok(SequenceGrad {
        loss: value,
        correct,
        bits,
        grads: back.for_store(&model.params),
        probe_grads: out
            .probes
            .iter()
            .map(|&p| back.wrt(p).cloned().unwrap_or_else(|| Array::zeros(g.shape(p))))
            .collect(),
    })
}

/// The whole-window reference of recurrent training: one backward over the
/// clip with cross-frame keys taken from stop-gradient copies, and a window of `cache` frames.
pub fn unrolled_gradients<T: Real>(
    model: &Model<T>,
    clip: &Clip,
    inputs: &ClipTokens,
    cache: usize,
    probe: bool,
) -> Result<SequenceGrad<T>> {
    let opts = ForwardOptions {
        window: Some(cache),
        detach_past: true,
        probe,
    };
    clip_gradients(model, clip, inputs, &opts)
}

/// Stop-gradient latents of one processed frame.
struct FrameLatents<T> {
    tokens: Vec<TokenMeta>,
    /// `[module][layer]`.
    latents: Vec<Vec<Rc<Array<T>>>>,
}

fn recurrent_memory<T: Real>(cfg: &ModelConfig, frames: &VecDeque<FrameLatents<T>>) -> Result<Memory<T>> {
    let modules = cfg.kv_modules();
    let mut out = Vec::with_capacity(modules.len());
    for (mi, m) in modules.iter().enumerate() {
        let temporal = matches!(m, AttnModule::Global | AttnModule::CrossFrame);
        if !temporal || frames.is_empty() {
            out.push(KeyMemory::empty(cfg.layers, cfg.width));
            continue;
        }
        let tokens = frames.iter().flat_map(|f| f.tokens.iter().copied()).collect();
        let latents = (0..cfg.layers)
            .map(|l| {
                let mut data = Vec::new();
                for f in frames {
                    data.extend_from_slice(f.latents[mi][l].data());
                }
                let rows = data.len() / cfg.width;
                Array::new(vec![rows, cfg.width], data).map(Rc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(KeyMemory { tokens, latents });
    }
    Ok(Memory { modules: out })
}

/// Frame-by-frame gradients of one sequence: each frame sees stop-gradient
/// latents of at most `cache` earlier frames and is backpropagated on its own.
pub fn recurrent_gradients<T: Real>(
    model: &Model<T>,
    clip: &Clip,
    inputs: &ClipTokens,
    cache: usize,
    probe: bool,
) -> Result<SequenceGrad<T>> {
    let cfg = &model.cfg;
    clip.validate(&cfg.schedule)?;
    if cache == 0 {
        return Err(Error::Config("cache must hold at least one frame".into()));
    }
    let mut past: VecDeque<FrameLatents<T>> = VecDeque::new();
    let mut acc: Vec<Array<T>> = model.params.iter().map(|(_, v)| Array::zeros(v.shape())).collect();
    let mut probe_grads = Vec::new();
    let (mut loss, mut correct, mut bits) = (0.0, 0, 0);
    for t in 0..clip.len() {
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        for k in 0..cfg.schedule.num_scales() {
            let toks = step_tokens(&cfg.schedule, &clip.frames[t], t, k)?;
            steps.push(StepBlock {
                t,
                k,
                start: tokens.len(),
                len: toks.len(),
            });
            tokens.extend(toks);
        }
        let prefix = prefix_rows(&cfg.schedule, &tokens, &inputs[t..=t], t)?;
        let targets = target_bits(&tokens, &clip.tokens[t..=t], t)?;
        let chunk = ChunkInput {
            tokens: tokens.clone(),
            prefix,
            conditions: [(t, clip.conditions[t].clone())].into_iter().collect(),
        };
        let memory = recurrent_memory(cfg, &past)?;
        let opts = ForwardOptions {
            window: Some(cache),
            detach_past: false,
            probe,
        };
        let mut g = Graph::new();
        let out = forward_chunk(&mut g, cfg, &model.params, &chunk, &memory, &opts)?;
        let (l, c, b) = steps_loss(&mut g, out.logits, &steps, &targets, cfg.schedule.bits)?;
        loss += g.value(l).item().f64();
        correct += c;
        bits += b;
        let back = g.backward(l)?;
        accumulate(&mut acc, &back.for_store(&model.params));
        probe_grads.extend(
            out.probes
                .iter()
                .map(|&p| back.wrt(p).cloned().unwrap_or_else(|| Array::zeros(g.shape(p)))),
        );
        past.push_back(FrameLatents {
            tokens,
            latents: out
                .latents
                .iter()
                .map(|per_layer| per_layer.iter().map(|&v| Rc::new(g.value(v).clone())).collect())
                .collect(),
        });
        while past.len() > cache {
            past.pop_front();
        }
        assert!(past.len() <= cache, "recurrent cache above capacity");
    }
    Ok(SequenceGrad {
        loss,
        correct,
        bits,
        grads: acc,
        probe_grads,
    })
}

fn finish_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    parts: Vec<SequenceGrad<T>>,
    start: Instant,
) -> Result<TrainStats> {
    let n = parts.len() as f64;
    let mut grads: Vec<Array<T>> = model.params.iter().map(|(_, v)| Array::zeros(v.shape())).collect();
    let (mut loss, mut correct, mut bits) = (0.0, 0, 0);
    for p in &parts {
        accumulate(&mut grads, &p.grads);
        loss += p.loss / n;
        correct += p.correct;
        bits += p.bits;
    }
    let scale = T::lit(1.0 / n);
    for g in &mut grads {
        for x in g.data_mut() {
            *x = *x * scale;
        }
    }
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let stats = TrainStats {
        step: opt.step_count() as usize,
        loss,
        bit_accuracy: correct as f64 / bits.max(1) as f64,
        grad_norm,
        seconds: start.elapsed().as_secs_f64(),
    };
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("training diverged: {stats}")));
    }
    opt.step(&mut model.params, &grads)?;
    Ok(TrainStats {
        step: opt.step_count() as usize,
        ..stats
    })
}

/// One update on a batch of teacher-forced clips with error-injected inputs.
pub fn clip_train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[Clip],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let start = Instant::now();
    let parts = batch
        .iter()
        .map(|clip| {
            let inputs = corrupt_tokens(&clip.tokens, cfg.error_rate, rng)?;
            clip_gradients(model, clip, &inputs, &ForwardOptions::default())
        })
        .collect::<Result<Vec<_>>>()?;
    finish_step(model, opt, cfg, parts, start)
}

/// One update from frame-by-frame accumulated gradients of long sequences.
pub fn recurrent_train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &[Clip],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let start = Instant::now();
    let parts = batch
        .iter()
        .map(|clip| {
            let inputs = corrupt_tokens(&clip.tokens, cfg.error_rate, rng)?;
            recurrent_gradients(model, clip, &inputs, cfg.cache, false)
        })
        .collect::<Result<Vec<_>>>()?;
    finish_step(model, opt, cfg, parts, start)
}

/// Supplies training sequences.
pub trait ClipSource {
    /// `cfg.batch` sequences of `cfg.clip_len` frames drawn with `rng`.
    fn batch(&mut self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Clip>>;
}

/// Fixed pool of tokenized sequences; batches are random windows.
pub struct ClipPool {
    pub sequences: Vec<Clip>,
}

impl ClipSource for ClipPool {
    fn batch(&mut self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Clip>> {
        let usable: Vec<&Clip> = self.sequences.iter().filter(|c| c.len() >= cfg.clip_len).collect();
        if usable.is_empty() {
            return Err(Error::Data(format!("no sequence has {} frames", cfg.clip_len)));
        }
        Ok((0..cfg.batch)
            .map(|_| {
                let c = usable[rng.gen_range(0..usable.len())];
                let s = rng.gen_range(0..=c.len() - cfg.clip_len);
                c.slice(s..s + cfg.clip_len)
            })
            .collect())
    }
}

/// Model, optimizer and RNG of one training stage.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            model,
            opt,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn train_step(&mut self, source: &mut dyn ClipSource) -> Result<TrainStats> {
        self.opt.lr = self.cfg.lr_at(self.step);
        let batch = source.batch(&self.cfg, &mut self.rng)?;
        let stats = match self.cfg.stage {
            Stage::Clip => clip_train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, &mut self.rng)?,
            Stage::Recurrent => recurrent_train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, &mut self.rng)?,
        };
        self.step += 1;
        Ok(TrainStats { step: self.step, ..stats })
    }

    /// Runs `cfg.steps` updates, calling `on_step` after each.
    pub fn run(&mut self, source: &mut dyn ClipSource, mut on_step: impl FnMut(&TrainStats) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let s = self.train_step(source)?;
            on_step(&s)?;
        }
        Ok(())
    }
}

/// Checkpoint written after stage `i` of a schedule.
pub fn stage_checkpoint(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("stage_{i}.ckpt"))
}

/// Runs `stages[start..]` in order, saving a checkpoint after each. A stage
/// after the first starts from the previous stage's checkpoint, which must exist.
pub fn stage_schedule(
    stages: &[TrainConfig],
    initial: Model<f32>,
    source: &mut dyn ClipSource,
    dir: &Path,
    start: usize,
    mut on_step: impl FnMut(usize, &TrainStats) -> Result<()>,
) -> Result<Model<f32>> {
    if stages.is_empty() || start >= stages.len() {
        return Err(Error::Driver(format!("no stages to run from index {start}")));
    }
    if stages.windows(2).any(|w| w[0].stage == Stage::Recurrent && w[1].stage == Stage::Clip) {
        return Err(Error::Driver("clip stages must precede recurrent stages".into()));
    }
    fs::create_dir_all(dir)?;
    let mut model = if start == 0 {
        initial
    } else {
        let path = stage_checkpoint(dir, start - 1);
        if !path.exists() {
            return Err(Error::Driver(format!("missing checkpoint {} before stage {start}", path.display())));
        }
        Checkpoint::load(&path)?.model::<f32>()?
    };
    for (i, cfg) in stages.iter().enumerate().skip(start) {
        let mut trainer = Trainer::new(model, cfg.clone())?;
        trainer.run(source, |s| on_step(i, s))?;
        model = trainer.model;
        let mut ck = Checkpoint::new(CheckpointConfig {
            model: Some(model.cfg.clone()),
            train: Some(cfg.clone()),
            ..CheckpointConfig::default()
        });
        ck.add_store("model.", &model.params);
        ck.save(&stage_checkpoint(dir, i))?;
    }
    Ok(model)
}
