//! Multi-scale bitwise residual tokenizer.
//!
//! An encoder maps an image to a feature grid `F` at the finest scale. Scale
//! tokens are extracted residually: at scale `k` the remaining residual is
//! area-averaged to `h_k × w_k` and binarized with `sign`; its bilinear
//! upsampling is added to the running reconstruction. Decoding any prefix of
//! scales sums the upsampled maps and runs the decoder.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{fan_in_std, init_linear, init_mlp, linear, mlp, LN_EPS};
use crate::tensor::{AdamW, Array, Graph, ParamStore, Real, Var};

/// Grid size per scale and bits per token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    pub grids: Vec<(usize, usize)>,
    pub bits: usize,
}

impl ScaleSchedule {
    pub fn new(grids: Vec<(usize, usize)>, bits: usize) -> Result<Self> {
        if grids.is_empty() || bits == 0 {
            return Err(Error::Config("schedule needs ≥1 scale and ≥1 bit".into()));
        }
        if grids.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config(format!("zero grid in schedule {grids:?}")));
        }
        if grids.windows(2).any(|p| p[1].0 < p[0].0 || p[1].1 < p[0].1) {
            return Err(Error::Config(format!("schedule grids must not shrink: {grids:?}")));
        }
        Ok(Self { grids, bits })
    }

    /// 1×1, 2×2, 4×4 with 16 bits (16×16 images, patch 4).
    pub fn toy16() -> Self {
        Self {
            grids: vec![(1, 1), (2, 2), (4, 4)],
            bits: 16,
        }
    }

    /// 1×1 … 8×8 with 16 bits (32×32 images, patch 4).
    pub fn toy32() -> Self {
        Self {
            grids: vec![(1, 1), (2, 2), (4, 4), (8, 8)],
            bits: 16,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.grids.len()
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.grids.last().expect("non-empty schedule")
    }

    pub fn cells(&self, k: usize) -> usize {
        self.grids[k].0 * self.grids[k].1
    }

    pub fn cells_per_image(&self) -> usize {
        (0..self.num_scales()).map(|k| self.cells(k)).sum()
    }
}

/// Area-average weights `[to][from]` for shrinking a 1D axis.
fn area_1d(from: usize, to: usize) -> Vec<Vec<f64>> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            (0..from)
                .map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    overlap / ratio
                })
                .collect()
        })
        .collect()
}

/// Bilinear weights `[to][from]` with half-pixel centers and edge clamping.
fn bilinear_1d(from: usize, to: usize) -> Vec<Vec<f64>> {
    (0..to)
        .map(|i| {
            let mut row = vec![0.0; from];
            let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(from - 1);
            let a = s - i0 as f64;
            row[i0] += 1.0 - a;
            row[i1] += a;
            row
        })
        .collect()
}

fn axis_matrix(from: usize, to: usize) -> Vec<Vec<f64>> {
    if to <= from {
        area_1d(from, to)
    } else {
        bilinear_1d(from, to)
    }
}

/// Row-major resampling matrix `[to_h·to_w, from_h·from_w]`: area averaging on
/// shrinking axes, bilinear interpolation on growing axes.
pub fn resample_matrix(from: (usize, usize), to: (usize, usize)) -> Array<f64> {
    let (ay, ax) = (axis_matrix(from.0, to.0), axis_matrix(from.1, to.1));
    let cols = from.0 * from.1;
    Array::from_fn(&[to.0 * to.1, cols], |idx| {
        let (r, c) = (idx / cols, idx % cols);
        ay[r / to.1][c / from.1] * ax[r % to.1][c % from.1]
    })
}

/// Constant resampling operators of one schedule in precision `T`.
#[derive(Clone, Debug)]
pub struct ScaleOps<T> {
    /// finest → scale k, `[n_k, N]`.
    pub down: Vec<Rc<Array<T>>>,
    /// scale k → finest, `[N, n_k]`.
    pub up: Vec<Rc<Array<T>>>,
    /// Scales `< k` stacked row-wise → prefix feature at scale k, `[n_k, Σ_{j<k} n_j]`; `None` for k = 0.
    pub prefix: Vec<Option<Rc<Array<T>>>>,
}

impl<T: Real> ScaleOps<T> {
    pub fn new(sched: &ScaleSchedule) -> Self {
        let fin = sched.finest();
        let down: Vec<Array<f64>> = sched.grids.iter().map(|&g| resample_matrix(fin, g)).collect();
        let up: Vec<Array<f64>> = sched.grids.iter().map(|&g| resample_matrix(g, fin)).collect();
        let mut prefix = vec![None];
        for k in 1..sched.num_scales() {
            let n_prev: usize = (0..k).map(|j| sched.cells(j)).sum();
            let n_fin = fin.0 * fin.1;
            let stacked = Array::from_fn(&[n_fin, n_prev], |idx| {
                let (r, mut c) = (idx / n_prev, idx % n_prev);
                let mut j = 0;
                while c >= sched.cells(j) {
                    c -= sched.cells(j);
                    j += 1;
                }
                up[j].data()[r * sched.cells(j) + c]
            });
            let p = down[k].matmul(&stacked).expect("prefix operator shapes");
            prefix.push(Some(Rc::new(p.cast())));
        }
        Self {
            down: down.iter().map(|a| Rc::new(a.cast())).collect(),
            up: up.iter().map(|a| Rc::new(a.cast())).collect(),
            prefix,
        }
    }
}

/// Bits of one scale of one image: `h·w` cells row-major, `bits` entries each, all ±1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ScaleTokenMap {
    pub view: usize,
    pub time_index: usize,
    pub scale: usize,
    pub h: usize,
    pub w: usize,
    pub bits: usize,
    pub data: Vec<i8>,
}

impl ScaleTokenMap {
    pub fn from_signs<T: Real>(view: usize, time_index: usize, scale: usize, grid: (usize, usize), a: &Array<T>) -> Self {
        let data = a.data().iter().map(|&x| if x >= T::zero() { 1 } else { -1 }).collect();
        Self {
            view,
            time_index,
            scale,
            h: grid.0,
            w: grid.1,
            bits: a.cols(),
            data,
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array<T: Real>(&self) -> Array<T> {
        Array::from_fn(&[self.cells(), self.bits], |i| T::lit(self.data[i] as f64))
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&b| b == 1 || b == -1) && self.data.len() == self.cells() * self.bits
    }
}

/// Brute-force accumulation of a contiguous scale prefix at the finest grid.
fn accumulate_reference(tokens: &[ScaleTokenMap], sched: &ScaleSchedule) -> Array<f64> {
    let fin = sched.finest();
    let mut acc = Array::zeros(&[fin.0 * fin.1, sched.bits]);
    for x in tokens {
        let u = resample_matrix((x.h, x.w), fin);
        let up = u.matmul(&x.to_array()).expect("token grid matches schedule");
        for (a, b) in acc.data_mut().iter_mut().zip(up.data()) {
            *a += b;
        }
    }
    acc
}

fn check_prefix(tokens: &[ScaleTokenMap], sched: &ScaleSchedule) -> Result<()> {
    for (k, x) in tokens.iter().enumerate() {
        if x.scale != k {
            return Err(Error::Contract(format!("scale prefix not contiguous: position {k} holds scale {}", x.scale)));
        }
        if k >= sched.num_scales() || (x.h, x.w) != sched.grids[k] || x.bits != sched.bits {
            return Err(Error::Contract(format!("token map {k} does not match the schedule")));
        }
    }
    Ok(())
}

/// Teacher-forcing input for step `k = tokens.len()` (0-based): the sum of the
/// upsampled scales `< k`, area-resampled to the grid of scale `k`.
pub fn prefix_feature(tokens: &[ScaleTokenMap], sched: &ScaleSchedule) -> Result<Array<f64>> {
    if tokens.is_empty() {
        return Err(Error::Contract("the first scale uses the start embedding, not a prefix feature".into()));
    }
    check_prefix(tokens, sched)?;
    let k = tokens.len();
    if k >= sched.num_scales() {
        return Err(Error::Contract(format!("no scale after {k} in the schedule")));
    }
    let acc = accumulate_reference(tokens, sched);
    resample_matrix(sched.finest(), sched.grids[k]).matmul(&acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub hidden: usize,
    /// Residual (token-mix, MLP) blocks in each of the encoder and decoder.
    pub blocks: usize,
    pub schedule: ScaleSchedule,
}

impl TokenizerConfig {
    pub fn toy16() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            patch: 4,
            hidden: 96,
            blocks: 3,
            schedule: ScaleSchedule::toy16(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            )));
        }
        if self.schedule.finest() != self.latent_grid() {
            return Err(Error::Config(format!(
                "finest scale {:?} differs from the encoder grid {:?}",
                self.schedule.finest(),
                self.latent_grid()
            )));
        }
        ScaleSchedule::new(self.schedule.grids.clone(), self.schedule.bits).map(|_| ())
    }

    pub fn latent_grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Encoder/decoder parameters plus the constant resampling operators.
pub struct TokenizerNet<T: Real> {
    pub cfg: TokenizerConfig,
    pub params: ParamStore<T>,
    pub ops: ScaleOps<T>,
}

impl<T: Real> Clone for TokenizerNet<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            ops: self.ops.clone(),
        }
    }
}

/// Per-prefix reconstruction loss weights: intermediate prefixes get this weight, the full prefix 1.
const INTERMEDIATE_PREFIX_WEIGHT: f64 = 0.25;

impl<T: Real> TokenizerNet<T> {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (pd, hid, c) = (cfg.patch_dim(), cfg.hidden, cfg.schedule.bits);
        let n = cfg.latent_grid().0 * cfg.latent_grid().1;
        for side in ["enc", "dec"] {
            let fan = if side == "enc" { pd } else { c };
            init_linear(&mut p, &format!("{side}.in"), fan, hid, fan_in_std(fan), &mut rng);
            for b in 0..cfg.blocks {
                p.insert_full(&format!("{side}.b{b}.mix"), &[n, n], 0.0);
                let out_std = 0.5 * fan_in_std(2 * hid);
                init_mlp(&mut p, &format!("{side}.b{b}.mlp"), (hid, 2 * hid, hid), out_std, &mut rng);
            }
            let out = if side == "enc" { c } else { pd };
            init_linear(&mut p, &format!("{side}.out"), hid, out, fan_in_std(hid), &mut rng);
        }
        let ops = ScaleOps::new(&cfg.schedule);
        Ok(Self { cfg, params: p, ops })
    }

    /// Rebuilds a net around existing parameters (e.g. from a checkpoint).
    pub fn from_params(cfg: TokenizerConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg.clone(), 0)?;
        for (name, v) in fresh.params.iter() {
            let got = params.get(name)?;
            if got.shape() != v.shape() {
                return Err(Error::Contract(format!("tokenizer parameter `{name}` has shape {:?}", got.shape())));
            }
        }
        let ops = ScaleOps::new(&cfg.schedule);
        Ok(Self { cfg, params, ops })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.cfg.schedule
    }

    /// Image → `[N, patch_dim]` centered patches.
    pub fn patchify(&self, img: &Image) -> Result<Array<T>> {
        let cfg = &self.cfg;
        if img.height != cfg.image_h || img.width != cfg.image_w {
            return Err(Error::Data(format!(
                "image {}×{} incompatible with tokenizer {}×{}",
                img.height, img.width, cfg.image_h, cfg.image_w
            )));
        }
        let p = cfg.patch;
        let (gh, gw) = cfg.latent_grid();
        let pd = cfg.patch_dim();
        Ok(Array::from_fn(&[gh * gw, pd], |idx| {
            let (cell, f) = (idx / pd, idx % pd);
            let (pi, pj) = (cell / gw, cell % gw);
            let (dy, dx, ch) = (f / (3 * p), (f / 3) % p, f % 3);
            T::lit(img.data[((pi * p + dy) * img.width + pj * p + dx) * 3 + ch] as f64 - 0.5)
        }))
    }

    /// Inverse of [`Self::patchify`], clamped to `[0, 1]`.
    pub fn unpatchify(&self, patches: &Array<T>) -> Image {
        let cfg = &self.cfg;
        let p = cfg.patch;
        let (_, gw) = cfg.latent_grid();
        let pd = cfg.patch_dim();
        let mut data = vec![0.0f32; cfg.image_h * cfg.image_w * 3];
        for (idx, &v) in patches.data().iter().enumerate() {
            let (cell, f) = (idx / pd, idx % pd);
            let (pi, pj) = (cell / gw, cell % gw);
            let (dy, dx, ch) = (f / (3 * p), (f / 3) % p, f % 3);
            data[((pi * p + dy) * cfg.image_w + pj * p + dx) * 3 + ch] = (v.f64() + 0.5).clamp(0.0, 1.0) as f32;
        }
        Image {
            width: cfg.image_w,
            height: cfg.image_h,
            data,
        }
    }

    fn trunk(&self, g: &mut Graph<T>, p: &ParamStore<T>, side: &str, x: Var) -> Result<Var> {
        let mut h = linear(g, p, &format!("{side}.in"), x)?;
        for b in 0..self.cfg.blocks {
            let mix = g.param_named(p, &format!("{side}.b{b}.mix"))?;
            let n = g.layer_norm(h, LN_EPS);
            let m = g.matmul(mix, n)?;
            h = g.add(h, m)?;
            let n = g.layer_norm(h, LN_EPS);
            let m = mlp(g, p, &format!("{side}.b{b}.mlp"), n)?;
            h = g.add(h, m)?;
        }
        linear(g, p, &format!("{side}.out"), h)
    }

    /// Encoder features `F`, `[N, bits]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &ParamStore<T>, patches: Var) -> Result<Var> {
        self.trunk(g, p, "enc", patches)
    }

    /// Decoder output in centered patch space, `[N, patch_dim]`.
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &ParamStore<T>, acc: Var) -> Result<Var> {
        self.trunk(g, p, "dec", acc)
    }

    /// Residual quantization. Returns per-scale tokens and the running
    /// reconstruction after each scale. `sign` passes gradients straight through.
    pub fn quantize_graph(&self, g: &mut Graph<T>, f: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        self.quantize_impl(g, f, None)
    }

    /// Quantization with each `sign(r_k)` replaced by `sign(r0_k) + r_k − r0_k`,
    /// a smooth function whose value at `r = r0` and whose gradient equal the
    /// straight-through forward and backward. Used as a finite-difference oracle.
    pub fn quantize_linearized(&self, g: &mut Graph<T>, f: Var, r0: &[Array<T>]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.quantize_impl(g, f, Some(r0))
    }

    /// Pre-sign residuals `D_k (F − acc_{k−1})` of a quantization pass.
    pub fn residuals(&self, img: &Image) -> Result<Vec<Array<T>>> {
        let mut g = Graph::new();
        let x = g.constant(self.patchify(img)?);
        let f = self.encode_graph(&mut g, &self.params, x)?;
        let mut out = Vec::new();
        let mut acc: Option<Array<T>> = None;
        for k in 0..self.schedule().num_scales() {
            let r = match &acc {
                Some(a) => {
                    let fv = g.value(f);
                    let d: Vec<T> = fv.data().iter().zip(a.data()).map(|(&x, &y)| x - y).collect();
                    Array::new(fv.shape().to_vec(), d)?
                }
                None => g.value(f).clone(),
            };
            let r = self.ops.down[k].matmul(&r)?;
            let x = r.map(|v| if v >= T::zero() { T::one() } else { -T::one() });
            let up = self.ops.up[k].matmul(&x)?;
            acc = Some(match acc {
                Some(a) => Array::new(a.shape().to_vec(), a.data().iter().zip(up.data()).map(|(&p, &q)| p + q).collect())?,
                None => up,
            });
            out.push(r);
        }
        Ok(out)
    }

    fn quantize_impl(&self, g: &mut Graph<T>, f: Var, r0: Option<&[Array<T>]>) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut tokens = Vec::new();
        let mut accs: Vec<Var> = Vec::new();
        for k in 0..self.schedule().num_scales() {
            let r = match accs.last() {
                Some(&acc) => g.sub(f, acc)?,
                None => f,
            };
            let d = g.constant_rc(Rc::clone(&self.ops.down[k]));
            let r = g.matmul(d, r)?;
            let x = match r0 {
                None => g.sign_ste(r),
                Some(r0) => {
                    let base = &r0[k];
                    let signs = g.constant(base.map(|v| if v >= T::zero() { T::one() } else { -T::one() }));
                    let base = g.constant(base.clone());
                    let delta = g.sub(r, base)?;
                    g.add(signs, delta)?
                }
            };
            let u = g.constant_rc(Rc::clone(&self.ops.up[k]));
            let up = g.matmul(u, x)?;
            let acc = match accs.last() {
                Some(&acc) => g.add(acc, up)?,
                None => up,
            };
            tokens.push(x);
            accs.push(acc);
        }
        Ok((tokens, accs))
    }

    /// Tokenizes one image into `K` scale maps.
    pub fn encode_multiscale(&self, img: &Image, view: usize, time_index: usize) -> Result<Vec<ScaleTokenMap>> {
        let mut g = Graph::new();
        let x = self.patchify(img)?;
        let x = g.constant(x);
        let f = self.encode_graph(&mut g, &self.params, x)?;
        let (tokens, _) = self.quantize_graph(&mut g, f)?;
        Ok(tokens
            .iter()
            .enumerate()
            .map(|(k, &t)| ScaleTokenMap::from_signs(view, time_index, k, self.schedule().grids[k], g.value(t)))
            .collect())
    }

    /// Sum of upsampled scales of a contiguous prefix, `[N, bits]`.
    pub fn accumulate(&self, tokens: &[ScaleTokenMap]) -> Result<Array<T>> {
        check_prefix(tokens, self.schedule())?;
        let fin = self.schedule().finest();
        let mut acc = Array::zeros(&[fin.0 * fin.1, self.schedule().bits]);
        for (k, x) in tokens.iter().enumerate() {
            let up = self.ops.up[k].matmul(&x.to_array())?;
            for (a, b) in acc.data_mut().iter_mut().zip(up.data()) {
                *a = *a + *b;
            }
        }
        Ok(acc)
    }

    pub fn decode_accumulated(&self, acc: Array<T>) -> Result<Image> {
        let mut g = Graph::new();
        let a = g.constant(acc);
        let out = self.decode_graph(&mut g, &self.params, a)?;
        Ok(self.unpatchify(g.value(out)))
    }

    /// Decodes a contiguous prefix `X_1..X_k`; an empty prefix decodes the zero feature.
    pub fn decode_from_scales(&self, tokens: &[ScaleTokenMap]) -> Result<Image> {
        let acc = self.accumulate(tokens)?;
        self.decode_accumulated(acc)
    }

    /// Weighted sum of per-prefix reconstruction MSE for one image (graph form).
    pub fn reconstruction_loss(&self, g: &mut Graph<T>, p: &ParamStore<T>, img: &Image) -> Result<Var> {
        self.reconstruction_loss_impl(g, p, img, None)
    }

    /// [`Self::reconstruction_loss`] with the linearized quantizer around `r0`.
    pub fn reconstruction_loss_linearized(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        img: &Image,
        r0: &[Array<T>],
    ) -> Result<Var> {
        self.reconstruction_loss_impl(g, p, img, Some(r0))
    }

    fn reconstruction_loss_impl(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        img: &Image,
        r0: Option<&[Array<T>]>,
    ) -> Result<Var> {
        let target = self.patchify(img)?;
        let x = g.constant(target);
        let f = self.encode_graph(g, p, x)?;
        let (_, accs) = self.quantize_impl(g, f, r0)?;
        let k_all = accs.len();
        let mut total: Option<Var> = None;
        for (k, &acc) in accs.iter().enumerate() {
            let w = if k + 1 == k_all { 1.0 } else { INTERMEDIATE_PREFIX_WEIGHT };
            if w == 0.0 {
                continue;
            }
            let out = self.decode_graph(g, p, acc)?;
            let diff = g.sub(out, x)?;
            let sq = g.mul(diff, diff)?;
            let mse = g.mean(sq);
            let term = g.scale(mse, w);
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one scale"))
    }
}

/// One optimizer update on the mean reconstruction loss of `images`.
pub fn tokenizer_train_step<T: Real>(net: &mut TokenizerNet<T>, opt: &mut AdamW<T>, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Contract("empty tokenizer batch".into()));
    }
    let mut g = Graph::new();
    let mut total: Option<Var> = None;
    for img in images {
        let l = net.reconstruction_loss(&mut g, &net.params, img)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / images.len() as f64);
    let value = g.value(loss).item().f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("tokenizer loss is {value}")));
    }
    let grads = g.backward(loss)?.for_store(&net.params);
    opt.step(&mut net.params, &grads)?;
    Ok(value)
}

/// Optimizer schedule of the tokenizer training phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerTraining {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TokenizerTraining {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

impl TokenizerTraining {
    /// Cosine decay from `lr` towards zero over `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let p = step as f64 / self.steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()) + 1e-5
    }
}

/// Trains `net` on random batches of `images`, calling `on_step(step, loss)` after each update.
pub fn train_tokenizer<T: Real>(
    net: &mut TokenizerNet<T>,
    images: &[Image],
    cfg: &TokenizerTraining,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    if cfg.steps > 0 && (images.is_empty() || cfg.batch == 0) {
        return Err(Error::Data("tokenizer training needs images and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&net.params, cfg.lr, 0.0);
    for step in 0..cfg.steps {
        let batch: Vec<Image> = (0..cfg.batch)
            .map(|_| images[rand::Rng::gen_range(&mut rng, 0..images.len())].clone())
            .collect();
        opt.lr = cfg.lr_at(step);
        let loss = tokenizer_train_step(net, &mut opt, &batch)?;
        on_step(step, loss);
    }
    Ok(())
}
