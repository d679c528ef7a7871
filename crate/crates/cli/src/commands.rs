//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use worldmodel::checkpoint::{Checkpoint, CheckpointConfig};
use worldmodel::data::{clip_from_frames, plan_from_frames, tokenize_frames, ConditionSpec};
use worldmodel::engine::{
    generate_video, plan_ego_shift, process_step, write_rollout, RecurrentCache, RolloutPlan, SamplerConfig, StepSource,
};
use worldmodel::eval::{bit_accuracy_per_scale, frame_psnr, scene_report, MetricReport, MetricRow};
use worldmodel::geometry::Vec3;
use worldmodel::image::Image;
use worldmodel::model::{dual_causal_mask, Causality, FrameGeometry, Model, SequenceLayout};
use worldmodel::tokenizer::{train_tokenizer, ScaleSchedule, TokenizerNet};
use worldmodel::toyworld::{build_dataset, frame_file, load_dataset, load_scene, render_view, Episode, Frame, RigSpec};
use worldmodel::training::{ClipPool, StatsLog, Trainer};

use crate::config::RunConfig;

/// Worker threads for commands that parallelize over scenes.
pub fn worker_threads() -> usize {
    std::env::var("RAYNOVA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn conditions(cfg: &RunConfig, text_slots: usize) -> ConditionSpec {
    if cfg.rollout.conditions == "none" {
        ConditionSpec::none()
    } else {
        ConditionSpec::all(text_slots)
    }
}

fn sampler(cfg: &RunConfig, seed: u64) -> SamplerConfig {
    if cfg.rollout.argmax {
        SamplerConfig { seed, ..SamplerConfig::argmax() }
    } else {
        SamplerConfig::bernoulli(cfg.rollout.temperature, seed)
    }
}

/// Scenes from a dataset root (with `manifest`) or a single scene directory.
fn read_scenes(path: &Path) -> Result<Vec<(String, Episode, Vec<Frame>)>> {
    if path.join("manifest").exists() {
        let names: Vec<String> = fs::read_to_string(path.join("manifest"))?
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| l.split_whitespace().next().unwrap_or_default().to_string())
            .collect();
        let scenes = load_dataset(path)?;
        Ok(names.into_iter().zip(scenes).map(|(n, (e, f))| (n, e, f)).collect())
    } else {
        let (e, f) = load_scene(path)?;
        let name = path.file_name().map_or("scene".into(), |n| n.to_string_lossy().to_string());
        Ok(vec![(name, e, f)])
    }
}

/// Model and tokenizer stored in a checkpoint.
pub struct Loaded {
    pub model: Model<f32>,
    pub tokenizer: TokenizerNet<f32>,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let checkpoint = Checkpoint::load(path)?;
    let model = checkpoint.model::<f32>()?;
    let tokenizer = checkpoint.tokenizer::<f32>()?;
    Ok(Loaded {
        model,
        tokenizer,
    })
}

pub fn gen_data(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let spec = cfg.dataset(seed)?;
    let dirs = build_dataset(&spec, out)?;
    eprintln!("wrote {} scenes to {}", dirs.len(), out.display());
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: Option<&'a Path>,
    pub init: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: u64,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let scenes: Vec<Vec<Frame>> = match args.data {
        Some(d) => read_scenes(d)?.into_iter().map(|(_, _, f)| f).collect(),
        None => {
            let spec = cfg.dataset(args.seed)?;
            (0..spec.n_scenes).map(|i| spec.episode(i).render()).collect()
        }
    };
    fs::create_dir_all(args.out)?;
    let init = args.init.map(Checkpoint::load).transpose()?;

    let tokenizer = match init.as_ref().and_then(|c| c.config.tokenizer.as_ref().map(|_| c)) {
        Some(c) => c.tokenizer::<f32>()?,
        None => {
            let mut tok = TokenizerNet::<f32>::new(cfg.tokenizer.clone(), args.seed)?;
            let images: Vec<Image> = scenes.iter().flatten().flat_map(|f| f.images.iter().cloned()).collect();
            let mut log = String::from("step,loss\n");
            let tcfg = worldmodel::tokenizer::TokenizerTraining {
                seed: args.seed,
                ..cfg.tok_train
            };
            train_tokenizer(&mut tok, &images, &tcfg, |s, l| {
                let _ = writeln!(log, "{},{l:.6}", s + 1);
                if (s + 1) % 500 == 0 {
                    eprintln!("tokenizer step {} loss {l:.5}", s + 1);
                }
            })?;
            fs::write(args.out.join("tokenizer_stats.csv"), log)?;
            tok
        }
    };

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = args.seed;
    let model = match init.as_ref().and_then(|c| c.config.model.as_ref().map(|_| c)) {
        Some(c) => {
            let m = c.model::<f32>()?;
            let mut expected = m.cfg.clone();
            train_cfg.apply_variants(&mut expected);
            if expected != m.cfg {
                bail!("variant flags differ from the checkpoint's model configuration");
            }
            m
        }
        None => {
            let mut mcfg = cfg.model.clone();
            mcfg.schedule = tokenizer.schedule().clone();
            train_cfg.apply_variants(&mut mcfg);
            Model::<f32>::new(mcfg, args.seed)?
        }
    };
    let conds = conditions(cfg, model.cfg.text_slots);
    let mut pool = ClipPool {
        sequences: scenes
            .iter()
            .map(|frames| clip_from_frames(&tokenizer, frames, &conds))
            .collect::<worldmodel::Result<_>>()?,
    };
    let log = StatsLog::create(&args.out.join("stats.csv"))?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    trainer.run(&mut pool, |s| {
        log.append(s)?;
        if s.step % 100 == 0 || s.step == train_cfg.steps {
            eprintln!("{s}");
        }
        Ok(())
    })?;

    let mut notes = std::collections::BTreeMap::new();
    notes.insert("seed".to_string(), args.seed.to_string());
    notes.insert("scenes".to_string(), scenes.len().to_string());
    let mut ck = Checkpoint::new(CheckpointConfig {
        model: Some(trainer.model.cfg.clone()),
        tokenizer: Some(tokenizer.cfg.clone()),
        train: Some(train_cfg),
        notes,
    });
    ck.add_store("model.", &trainer.model.params);
    ck.add_store("tok.", &tokenizer.params);
    let path = args.out.join("model.ckpt");
    ck.save(&path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

pub struct RolloutArgs<'a> {
    pub checkpoint: &'a Path,
    pub scene: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: u64,
    pub frames: Option<usize>,
    pub cache: Option<usize>,
    /// Camera shift in the ego frame; set for novel-view synthesis.
    pub shift: Option<Vec3>,
}

/// Scene to roll out: loaded from disk or sampled from `seed` on the model's rig.
fn rollout_scene(cfg: &RunConfig, scene: Option<&Path>, seed: u64, frames: Option<usize>) -> Result<(Episode, Vec<Frame>)> {
    let (ep, mut fr) = match scene {
        Some(p) => load_scene(p)?,
        None => {
            let mut spec = cfg.dataset(seed)?;
            spec.n_scenes = 1;
            spec.frames = frames.unwrap_or(spec.frames);
            spec.rigs.truncate(1);
            let ep = spec.episode(0);
            let fr = ep.render();
            (ep, fr)
        }
    };
    if let Some(n) = frames {
        if n == 0 || n > fr.len() {
            bail!("--frames {n} outside 1..={}", fr.len());
        }
        fr.truncate(n);
    }
    Ok((ep, fr))
}

fn psnr_report(name: &str, generated: &[Vec<Image>], truth: &[Vec<Image>], context: &[bool]) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    for (t, (g, gt)) in generated.iter().zip(truth).enumerate() {
        let p = frame_psnr(g, gt)?;
        r.push(MetricRow {
            scene: name.to_string(),
            metric: "psnr".into(),
            t: Some(t),
            view: None,
            item: None,
            value: p.db,
            flag: if context[t] {
                "context".into()
            } else if p.exact {
                "exact".into()
            } else {
                String::new()
            },
        });
    }
    Ok(r)
}

pub fn rollout(cfg: &RunConfig, args: &RolloutArgs) -> Result<()> {
    let loaded = load_checkpoint(args.checkpoint)?;
    let (ep, frames) = rollout_scene(cfg, args.scene, args.seed, args.frames)?;
    let conds = conditions(cfg, loaded.model.cfg.text_slots);
    let mut plan = plan_from_frames(&frames, Some(&conds));
    let (context, truth): (Vec<Vec<Image>>, Vec<Vec<Image>>) = match args.shift {
        // Novel views are generated from conditions alone and scored at the shifted pose.
        Some(shift) => {
            plan = plan_ego_shift(&plan, shift);
            let truth = plan
                .frames
                .iter()
                .map(|f| f.poses.iter().map(|p| render_view(&ep.scene, p, f.time)).collect())
                .collect();
            (Vec::new(), truth)
        }
        None => {
            let n = cfg.rollout.context.min(frames.len());
            (
                frames[..n].iter().map(|f| f.images.clone()).collect(),
                frames.iter().map(|f| f.images.clone()).collect(),
            )
        }
    };
    let cache = args.cache.or(Some(cfg.train.cache));
    let result = generate_video(&loaded.model, &loaded.tokenizer, &plan, &context, cache, &sampler(cfg, args.seed))?;
    write_rollout(args.out, &result)?;
    plan.save(&args.out.join("plan.json"))?;
    if args.shift.is_some() {
        let dir = args.out.join("truth");
        fs::create_dir_all(&dir)?;
        for (t, views) in truth.iter().enumerate() {
            for (v, img) in views.iter().enumerate() {
                img.save_ppm(&dir.join(frame_file(t, v)))?;
            }
        }
    }
    let generated: Vec<Vec<Image>> = result.frames.iter().map(|f| f.images.clone()).collect();
    let is_context: Vec<bool> = result.frames.iter().map(|f| f.is_context).collect();
    let report = psnr_report("rollout", &generated, &truth, &is_context)?;
    fs::write(args.out.join("metrics.csv"), report.to_csv())?;
    eprintln!(
        "generated {} frames × {} views into {}",
        result.frames.len(),
        plan.views(),
        args.out.display()
    );
    Ok(())
}

pub fn dump_mask(variant: Causality, frames: usize, scales: usize) -> Result<String> {
    let base = ScaleSchedule::toy16();
    if frames == 0 || scales == 0 || scales > base.num_scales() {
        bail!("need frames ≥ 1 and 1 ≤ scales ≤ {}", base.num_scales());
    }
    let sched = ScaleSchedule::new(base.grids[..scales].to_vec(), base.bits)?;
    let rig = RigSpec::two_view(16, 16);
    let geoms: Vec<FrameGeometry> = (0..frames)
        .map(|t| {
            let ego = worldmodel::geometry::EgoPose {
                position: [t as f64, 0.0, 0.0],
                yaw: 0.0,
            };
            FrameGeometry {
                time: 0.5 * t as f64,
                ego,
                poses: (0..rig.views()).map(|v| rig.camera_pose(v, &ego)).collect(),
            }
        })
        .collect();
    let layout = SequenceLayout::new(&sched, &geoms, 0)?;
    let mask = dual_causal_mask(&layout, variant)?;
    Ok(format!("# variant {}\n{}", variant.name(), mask.to_text()))
}

/// Predicted images of `truth` read from `dir` (a scene or rollout directory),
/// with the context flags from a rollout index when present.
fn read_prediction(dir: &Path, truth: &[Frame]) -> Result<(Vec<Vec<Image>>, Vec<bool>)> {
    let images = truth
        .iter()
        .enumerate()
        .map(|(t, f)| {
            (0..f.images.len())
                .map(|v| {
                    let p = dir.join(frame_file(t, v));
                    Image::load_ppm(&p).with_context(|| format!("reading {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut context = vec![false; truth.len()];
    let index = dir.join("index.csv");
    if index.exists() {
        for line in fs::read_to_string(index)?.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 5 && cols[3] == "1" {
                if let Some(c) = cols[0].parse::<usize>().ok().and_then(|t| context.get_mut(t)) {
                    *c = true;
                }
            }
        }
    }
    Ok((images, context))
}

pub struct EvalArgs<'a> {
    pub scene: &'a Path,
    pub pred: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub out: &'a Path,
}

fn eval_one(name: &str, ep: &Episode, truth: &[Frame], pred_dir: &Path, checkpoint: Option<&Checkpoint>) -> Result<MetricReport> {
    let (pred, context) = read_prediction(pred_dir, truth)?;
    let mut report = scene_report(name, &ep.scene, truth, &pred, &context)?;
    if let Some(ck) = checkpoint {
        let tok = ck.tokenizer::<f32>()?;
        let truth_tokens = tokenize_frames(&tok, truth)?;
        let pred_frames: Vec<Frame> = truth
            .iter()
            .zip(&pred)
            .map(|(f, p)| Frame {
                images: p.clone(),
                ..f.clone()
            })
            .collect();
        let pred_tokens = tokenize_frames(&tok, &pred_frames)?;
        for (k, acc) in bit_accuracy_per_scale(&pred_tokens, &truth_tokens)?.into_iter().enumerate() {
            report.push(MetricRow {
                scene: name.to_string(),
                metric: "bit_accuracy".into(),
                t: None,
                view: None,
                item: Some(k),
                value: acc,
                flag: String::new(),
            });
        }
    }
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let scenes = read_scenes(args.scene)?;
    let multi = args.scene.join("manifest").exists();
    let checkpoint = args.checkpoint.map(Checkpoint::load).transpose()?;
    let jobs: Vec<(String, PathBuf)> = scenes
        .iter()
        .map(|(n, _, _)| (n.clone(), if multi { args.pred.join(n) } else { args.pred.to_path_buf() }))
        .collect();
    let threads = worker_threads().min(jobs.len()).max(1);
    // Scenes are split into contiguous chunks and the reports joined in scene order.
    let chunk = jobs.len().div_ceil(threads);
    let reports: Vec<Result<MetricReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .zip(scenes.chunks(chunk))
            .map(|(js, sc)| {
                let ck = checkpoint.as_ref();
                s.spawn(move || {
                    let mut r = MetricReport::default();
                    for ((name, dir), (_, ep, truth)) in js.iter().zip(sc) {
                        r.extend(eval_one(name, ep, truth, dir, ck)?);
                    }
                    Ok(r)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut report = MetricReport::default();
    for r in reports {
        report.extend(r?);
    }
    let path = if args.out.extension().is_some_and(|e| e == "csv") {
        args.out.to_path_buf()
    } else {
        fs::create_dir_all(args.out)?;
        args.out.join("metrics.csv")
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, report.to_csv())?;
    eprintln!("wrote {} metric rows to {}", report.rows.len(), path.display());
    Ok(())
}

pub struct BenchArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub seed: u64,
    pub frames: usize,
    pub cache: Option<usize>,
}

/// Times generation without context: per-step latency and decoded images per second.
pub fn bench(cfg: &RunConfig, args: &BenchArgs) -> Result<String> {
    let (model, tokenizer) = match args.checkpoint {
        Some(p) => {
            let l = load_checkpoint(p)?;
            (l.model, l.tokenizer)
        }
        None => {
            let tok = TokenizerNet::<f32>::new(cfg.tokenizer.clone(), args.seed)?;
            let mut mcfg = cfg.model.clone();
            cfg.train.apply_variants(&mut mcfg);
            (Model::<f32>::new(mcfg, args.seed)?, tok)
        }
    };
    let (_, frames) = rollout_scene(cfg, None, args.seed, Some(args.frames))?;
    let plan: RolloutPlan = plan_from_frames(&frames, Some(&conditions(cfg, model.cfg.text_slots)));
    let mut cache = RecurrentCache::<f32>::new(args.cache.or(Some(cfg.train.cache)))?;
    let sampler = sampler(cfg, args.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let k_n = model.cfg.schedule.num_scales();
    let mut step_secs = vec![0.0f64; k_n];
    let mut decode_secs = 0.0;
    let start = Instant::now();
    for t in 0..plan.frames.len() {
        let geom = plan.geometry(t);
        let conds = plan.conditions(t, model.cfg.text_slots)?;
        let mut maps = vec![Vec::new(); plan.views()];
        for (k, secs) in step_secs.iter_mut().enumerate() {
            let s = Instant::now();
            let out = process_step(&model, &mut cache, &geom, t, k, &conds, StepSource::Sample(&sampler, &mut rng))?;
            *secs += s.elapsed().as_secs_f64();
            for (v, m) in out.maps.into_iter().enumerate() {
                maps[v].push(m);
            }
        }
        cache.evict();
        let s = Instant::now();
        for m in &maps {
            tokenizer.decode_from_scales(m)?;
        }
        decode_secs += s.elapsed().as_secs_f64();
    }
    let total = start.elapsed().as_secs_f64();
    let images = plan.frames.len() * plan.views();
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "frames,{}", plan.frames.len());
    let _ = writeln!(out, "views,{}", plan.views());
    let _ = writeln!(out, "images_per_second,{:.3}", images as f64 / total);
    let _ = writeln!(out, "decode_ms_per_image,{:.3}", 1e3 * decode_secs / images as f64);
    for (k, s) in step_secs.iter().enumerate() {
        let _ = writeln!(out, "step_ms_scale_{k},{:.3}", 1e3 * s / plan.frames.len() as f64);
    }
    Ok(out)
}

/// Parses `X,Y,Z`.
pub fn parse_shift(s: &str) -> std::result::Result<Vec3, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got `{s}`"));
    }
    let mut v = [0.0f64; 3];
    for (o, p) in v.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(v)
}
