//! End-to-end runs of the `worldmodel` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use worldmodel::checkpoint::Checkpoint;
use worldmodel::model::{Causality, Model, ModelConfig, SpatioTemporal};
use worldmodel::tokenizer::{TokenizerConfig, TokenizerNet};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_worldmodel"));
    c.env("RAYNOVA_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "scenes = 2\nframes = 3\ntok_steps = 3\ntok_batch = 4\nsteps = 2\nbatch = 2\nclip_len = 2\nrig = v2\n";

/// Every file under `dir` with its bytes, by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// gen-data, train, rollout, nvs, eval and dump-mask into `root`.
fn pipeline(root: &Path) {
    let cfg = root.join("cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = root.join("data");
    let run_dir = root.join("run");
    let ck = run_dir.join("model.ckpt");
    run(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", "3"]);
    run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run_dir), "--seed", "3"]);
    let scene = data.join("scene_0000");
    run(&["rollout", "--config", s(&cfg), "--checkpoint", s(&ck), "--scene", s(&scene), "--out", s(&root.join("roll")), "--seed", "4"]);
    let bern = format!("{SMALL}sampler = bernoulli\n");
    let bern_cfg = root.join("bern");
    fs::write(&bern_cfg, bern).unwrap();
    run(&["rollout", "--config", s(&bern_cfg), "--checkpoint", s(&ck), "--out", s(&root.join("sampled")), "--seed", "5", "--frames", "2"]);
    run(&["nvs", "--config", s(&cfg), "--checkpoint", s(&ck), "--scene", s(&scene), "--out", s(&root.join("nvs")), "--shift", "0,-0.5,0"]);
    run(&["eval", "--scene", s(&data), "--pred", s(&data), "--checkpoint", s(&ck), "--out", s(&root.join("eval"))]);
    run(&["dump-mask", "--variant", "same_scale", "--frames", "2", "--scales", "3", "--out", s(&root.join("mask.txt"))]);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), sb.len());
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
    assert!(sa.iter().any(|(p, _)| p.ends_with("model.ckpt")));
}

#[test]
fn dump_mask_matches_rule_enumeration() {
    let out = run(&["dump-mask", "--variant", "prefix_scales", "--frames", "2", "--scales", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with('(')).collect();
    let steps = [(0, 0), (0, 1), (1, 0), (1, 1)];
    assert_eq!(rows.len(), steps.len());
    for (row, &(t, k)) in rows.iter().zip(&steps) {
        let cells: Vec<&str> = row.split_whitespace().skip(1).collect();
        let expect: Vec<&str> = steps
            .iter()
            .map(|&(t2, k2)| if t2 <= t && k2 <= k { "#" } else { "." })
            .collect();
        assert_eq!(cells, expect, "row ({t},{k})");
    }
    assert_eq!(
        text,
        "# variant prefix_scales\n       (1,1) (1,2) (2,1) (2,2)\n(1,1)      #     .     .     .\n(1,2)      #     #     .     .\n(2,1)      #     .     #     .\n(2,2)      #     #     #     #\n"
    );
}

#[test]
fn eval_of_ground_truth_against_itself_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("cfg");
    fs::write(&cfg, "scenes = 2\nframes = 3\nrig = v3\nimage_width = 32\nimage_height = 32\n").unwrap();
    run(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--seed", "8"]);
    let out = dir.path().join("m.csv");
    run(&["eval", "--scene", s(&data), "--pred", s(&data), "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut psnr = 0;
    let mut iou = 0;
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        match c[1] {
            "psnr" => {
                assert_eq!((c[5], c[6]), ("inf", "exact"), "{line}");
                psnr += 1;
            }
            "box_iou" => {
                assert_eq!(c[5], "1.000000", "{line}");
                iou += 1;
            }
            _ => {}
        }
    }
    assert_eq!(psnr, 6);
    assert!(iou > 0);
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg");
    fs::write(&cfg, "scenes = 1\nframes = 2\ntok_steps = 0\nsteps = 0\nrig = v2\n").unwrap();
    let out = dir.path().join("run");
    run(&["train", "--config", s(&cfg), "--out", s(&out), "--seed", "9", "--variant", "all_scales", "--st", "decoupled"]);
    let ck = Checkpoint::load(&out.join("model.ckpt")).unwrap();
    let tcfg = TokenizerConfig::toy16();
    let mut mcfg = ModelConfig::small(tcfg.schedule.clone());
    mcfg.causality = Causality::AllScales;
    mcfg.spatio_temporal = SpatioTemporal::Decoupled;
    let init = Model::<f32>::new(mcfg, 9).unwrap();
    assert!(ck.model::<f32>().unwrap().params.bit_equal(&init.params));
    let tok = TokenizerNet::<f32>::new(tcfg, 9).unwrap();
    assert!(ck.tokenizer::<f32>().unwrap().params.bit_equal(&tok.params));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin().args(["dump-mask", "--variant", "sideways"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = bin().args(["nvs", "--checkpoint", "x", "--out", "y", "--shift", "1,2"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"WMCKPT\0\0garbage").unwrap();
    let st = bin()
        .args(["rollout", "--checkpoint", s(&bad), "--out", s(&dir.path().join("o"))])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let st = bin()
        .args(["eval", "--scene", s(&dir.path().join("missing")), "--pred", "x", "--out", "y.csv"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
}

#[test]
fn bench_reports_throughput() {
    let out = run(&["bench", "--frames", "2", "--seed", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("metric,value\nframes,2\nviews,"));
    assert!(text.contains("images_per_second,"));
    assert!(text.contains("step_ms_scale_0,"));
}
