//! Image metrics and rollout evaluation protocols.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{plan_from_frames, ConditionSpec};
use crate::engine::{generate_video, Rollout, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraPose};
use crate::image::Image;
use crate::model::Model;
use crate::tensor::Real;
use crate::tokenizer::TokenizerNet;
use crate::toyworld::{cast_ray, Frame, Hit, SceneSpec, GROUND, GROUND_FAR, SKY};

/// Value used in place of an infinite PSNR when averaging.
pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB for intensities in `[0, 1]`, with identical inputs flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    pub exact: bool,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Self {
                db: f64::INFINITY,
                exact: true,
            }
        } else {
            Self {
                db: -10.0 * mse.log10(),
                exact: false,
            }
        }
    }

    /// Finite value for averaging.
    pub fn capped(&self) -> f64 {
        self.db.min(PSNR_CAP)
    }
}

fn check_same_size(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Contract(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_size(a, b)?;
    let n = a.data.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// PSNR of the pooled squared error over all views of a frame.
pub fn frame_psnr(a: &[Image], b: &[Image]) -> Result<Psnr> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Contract(format!("{} views vs {} views", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += mse(x, y)?;
    }
    Ok(Psnr::from_mse(total / a.len() as f64))
}

/// Per-frame PSNR of a rollout against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub psnr: Vec<Psnr>,
    /// Capped PSNR of the last frame.
    pub last: f64,
    /// Least-squares slope of capped PSNR against frame index, dB per frame.
    pub slope: f64,
}

pub fn drift_curve(rollout: &[Vec<Image>], truth: &[Vec<Image>]) -> Result<DriftCurve> {
    if rollout.len() != truth.len() || rollout.is_empty() {
        return Err(Error::Contract(format!(
            "rollout has {} frames, ground truth {}",
            rollout.len(),
            truth.len()
        )));
    }
    let psnr = rollout
        .iter()
        .zip(truth)
        .map(|(a, b)| frame_psnr(a, b))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<f64> = psnr.iter().map(Psnr::capped).collect();
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    Ok(DriftCurve {
        last: *ys.last().expect("non-empty"),
        slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
        psnr,
    })
}

/// Outcome of the box-color IoU metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoxIou {
    Valid(f64),
    /// The box color is not unique among the scene's reference colors.
    ColorCollision,
    /// The box covers no pixel of the ground-truth render.
    NotVisible,
}

/// Reference colors of a scene: background classes, lanes, then cuboids.
fn reference_colors(scene: &SceneSpec) -> Vec<[f32; 3]> {
    let mut out = vec![SKY, GROUND[0], GROUND[1], GROUND_FAR];
    out.extend(scene.lanes.iter().map(|l| l.color));
    out.extend(scene.cuboids.iter().map(|c| c.color));
    out
}

/// Index of the nearest reference color of every pixel.
pub fn classify_colors(img: &Image, refs: &[[f32; 3]]) -> Vec<usize> {
    (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .map(|(x, y)| {
            let p = img.pixel(x, y);
            let dist = |c: &[f32; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f32>();
            (0..refs.len())
                .min_by(|&a, &b| dist(&refs[a]).total_cmp(&dist(&refs[b])))
                .expect("non-empty reference set")
        })
        .collect()
}

/// IoU between the pixels of `generated` classified as the color of cuboid
/// `index` and the same classification of the exact render at `pose`.
pub fn box_color_iou(generated: &Image, scene: &SceneSpec, pose: &CameraPose, time: f64, index: usize) -> Result<BoxIou> {
    let truth = crate::toyworld::render_view(scene, pose, time);
    box_color_iou_against(generated, &truth, scene, index)
}

/// [`box_color_iou`] against an already rendered ground-truth image.
pub fn box_color_iou_against(generated: &Image, truth: &Image, scene: &SceneSpec, index: usize) -> Result<BoxIou> {
    check_same_size(generated, truth)?;
    let cuboid = scene
        .cuboids
        .get(index)
        .ok_or_else(|| Error::Contract(format!("scene has no cuboid {index}")))?;
    let refs = reference_colors(scene);
    if refs.iter().filter(|&&c| c == cuboid.color).count() != 1 {
        return Ok(BoxIou::ColorCollision);
    }
    let target = refs.len() - scene.cuboids.len() + index;
    let gen = classify_colors(generated, &refs);
    let gt = classify_colors(truth, &refs);
    let (mut inter, mut union, mut visible) = (0usize, 0usize, 0usize);
    for (&a, &b) in gen.iter().zip(&gt) {
        let (a, b) = (a == target, b == target);
        inter += usize::from(a && b);
        union += usize::from(a || b);
        visible += usize::from(b);
    }
    if visible == 0 {
        return Ok(BoxIou::NotVisible);
    }
    Ok(BoxIou::Valid(inter as f64 / union as f64))
}

/// Consistency of the views of one frame: PSNR between each pixel and its
/// counterpart in every other view that sees the same surface point, using
/// the exact scene geometry for correspondence. `None` when no view overlaps.
pub fn cross_view_psnr(images: &[Image], poses: &[CameraPose], scene: &SceneSpec, time: f64) -> Result<Option<Psnr>> {
    if images.len() != poses.len() {
        return Err(Error::Contract("images and poses differ in count".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (a, pa) in poses.iter().enumerate() {
        for (b, pb) in poses.iter().enumerate() {
            if a == b {
                continue;
            }
            for y in 0..pa.height {
                for x in 0..pa.width {
                    let d = pa.pixel_direction(x as f64 + 0.5, y as f64 + 0.5);
                    let target = match cast_ray(scene, time, pa.center, d) {
                        Hit::Sky => None,
                        Hit::Ground { point } | Hit::Lane { point, .. } | Hit::Cuboid { point, .. } => Some(point),
                    };
                    // Sky points are at infinity: project the direction from the other camera.
                    let point = target.unwrap_or_else(|| crate::geometry::add(pb.center, crate::geometry::scale(d, 1e6)));
                    let pr = project_point(pb, point);
                    if !(pr.in_front && (0.0..pb.width as f64).contains(&pr.u) && (0.0..pb.height as f64).contains(&pr.v)) {
                        continue;
                    }
                    if let Some(p) = target {
                        // The point must be the first surface seen from the other camera.
                        let db = crate::geometry::sub(p, pb.center);
                        let dist = crate::geometry::norm(db);
                        let seen = match cast_ray(scene, time, pb.center, crate::geometry::normalize(db)) {
                            Hit::Ground { point } | Hit::Lane { point, .. } | Hit::Cuboid { point, .. } => {
                                crate::geometry::norm(crate::geometry::sub(point, pb.center))
                            }
                            Hit::Sky => f64::INFINITY,
                        };
                        if (seen - dist).abs() > 1e-3 * dist.max(1.0) {
                            continue;
                        }
                    }
                    let ca = images[a].pixel(x, y);
                    let cb = images[b].pixel(pr.u.floor() as usize, pr.v.floor() as usize);
                    total += (0..3).map(|i| ((ca[i] - cb[i]) as f64).powi(2)).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
    }
    Ok((count > 0).then(|| Psnr::from_mse(total / count as f64)))
}

/// Rollout over the times and poses of `frames`, with the first `context`
/// frames given as images, a cache of `capacity` frames and argmax sampling
/// unless `sampler` says otherwise.
pub fn rollout_frames<T: Real, U: Real>(
    model: &Model<T>,
    tokenizer: &TokenizerNet<U>,
    frames: &[Frame],
    conds: Option<&ConditionSpec>,
    context: usize,
    capacity: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Rollout> {
    let plan = plan_from_frames(frames, conds);
    let ctx: Vec<Vec<Image>> = frames[..context.min(frames.len())].iter().map(|f| f.images.clone()).collect();
    generate_video(model, tokenizer, &plan, &ctx, capacity, sampler)
}

/// PSNR of each generated (non-context) frame of a rollout against `frames`.
pub fn rollout_psnr(rollout: &Rollout, frames: &[Frame]) -> Result<Vec<Psnr>> {
    rollout
        .frames
        .iter()
        .zip(frames)
        .filter(|(r, _)| !r.is_context)
        .map(|(r, f)| frame_psnr(&r.images, &f.images))
        .collect()
}

/// One row of a metric report; absent coordinates are left blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub metric: String,
    pub t: Option<usize>,
    pub view: Option<usize>,
    /// Box id or scale index, depending on the metric.
    pub item: Option<usize>,
    pub value: f64,
    /// `exact` for identical images, `invalid` for unscorable entries, `context` for given frames.
    pub flag: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "scene,metric,t,view,item,value,flag";

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let value = if r.value.is_infinite() { "inf".to_string() } else { format!("{:.6}", r.value) };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scene,
                r.metric,
                opt(r.t),
                opt(r.view),
                opt(r.item),
                value,
                r.flag
            );
        }
        out
    }
}

/// Ground-truth comparison of one scene: per-frame PSNR, drift summary over
/// the non-context frames, and box-color IoU of every visible box.
pub fn scene_report(scene_name: &str, scene: &SceneSpec, truth: &[Frame], pred: &[Vec<Image>], context: &[bool]) -> Result<MetricReport> {
    if truth.len() != pred.len() || context.len() != pred.len() {
        return Err(Error::Contract(format!("{} ground-truth frames vs {} predicted", truth.len(), pred.len())));
    }
    let mut r = MetricReport::default();
    let row = |metric: &str, t: Option<usize>, view: Option<usize>, item: Option<usize>, value: f64, flag: &str| MetricRow {
        scene: scene_name.to_string(),
        metric: metric.to_string(),
        t,
        view,
        item,
        value,
        flag: flag.to_string(),
    };
    let mut gen_pred = Vec::new();
    let mut gen_truth = Vec::new();
    for (t, (f, p)) in truth.iter().zip(pred).enumerate() {
        let q = frame_psnr(p, &f.images)?;
        let flag = if context[t] {
            "context"
        } else if q.exact {
            "exact"
        } else {
            ""
        };
        r.push(row("psnr", Some(t), None, None, q.db, flag));
        if !context[t] {
            gen_pred.push(p.clone());
            gen_truth.push(f.images.clone());
        }
        for (v, (img, truth_img)) in p.iter().zip(&f.images).enumerate() {
            for b in &f.annotation.boxes {
                match box_color_iou_against(img, truth_img, scene, b.id)? {
                    BoxIou::Valid(x) => r.push(row("box_iou", Some(t), Some(v), Some(b.id), x, "")),
                    BoxIou::ColorCollision => r.push(row("box_iou", Some(t), Some(v), Some(b.id), f64::NAN, "invalid")),
                    BoxIou::NotVisible => {}
                }
            }
        }
    }
    if !gen_pred.is_empty() {
        let c = drift_curve(&gen_pred, &gen_truth)?;
        r.push(row("drift_last_psnr", None, None, None, c.last, ""));
        r.push(row("drift_slope", None, None, None, c.slope, ""));
    }
    Ok(r)
}

/// Fraction of matching token bits per scale between two token sets `[t][v][k]`.
pub fn bit_accuracy_per_scale(pred: &[Vec<Vec<crate::tokenizer::ScaleTokenMap>>], truth: &[Vec<Vec<crate::tokenizer::ScaleTokenMap>>]) -> Result<Vec<f64>> {
    let scales = truth.first().and_then(|f| f.first()).map_or(0, Vec::len);
    let mut hits = vec![0usize; scales];
    let mut total = vec![0usize; scales];
    for (pf, tf) in pred.iter().zip(truth) {
        for (pv, tv) in pf.iter().zip(tf) {
            for (k, (a, b)) in pv.iter().zip(tv).enumerate() {
                if a.data.len() != b.data.len() {
                    return Err(Error::Contract(format!("scale {k} token maps differ in size")));
                }
                hits[k] += a.data.iter().zip(&b.data).filter(|(x, y)| x == y).count();
                total[k] += a.data.len();
            }
        }
    }
    Ok(hits.iter().zip(&total).map(|(&h, &n)| h as f64 / n.max(1) as f64).collect())
}

/// Two-sided p-value of a paired t-test on `a − b` (Student t via the
/// regularized incomplete beta function).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract("paired test needs two equal samples of at least 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok((mean, if mean == 0.0 { 1.0 } else { 0.0 }));
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let p = incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok((mean, p))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - incomplete_beta(b, a, 1.0 - x);
    }
    let (mut c, mut d) = (1.0, 1.0 - (a + b) * x / (a + 1.0));
    d = 1.0 / if d.abs() < 1e-300 { 1e-300 } else { d };
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        for step in 0..2 {
            let num = if step == 0 {
                m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m))
            } else {
                -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0))
            };
            d = 1.0 + num * d;
            d = 1.0 / if d.abs() < 1e-300 { 1e-300 } else { d };
            c = 1.0 + num / c;
            if c.abs() < 1e-300 {
                c = 1e-300;
            }
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-15 {
            break;
        }
    }
    front * h / a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let p = psnr(&a, &a).unwrap();
        assert!(p.exact && p.db.is_infinite());
        let b = Image::filled(4, 4, [0.6; 3]);
        let p = psnr(&a, &b).unwrap();
        assert!((p.db - 20.0).abs() < 1e-5 && !p.exact);
        assert!(psnr(&a, &Image::filled(3, 4, [0.5; 3])).is_err());
    }

    #[test]
    fn drift_curve_fixtures() {
        let base = Image::filled(4, 4, [0.5; 3]);
        let same: Vec<Vec<Image>> = vec![vec![base.clone()]; 5];
        let c = drift_curve(&same, &same).unwrap();
        assert!(c.psnr.iter().all(|p| p.exact));
        assert_eq!(c.slope, 0.0);
        let noisy: Vec<Vec<Image>> = vec![vec![Image::filled(4, 4, [0.55; 3])]; 5];
        let c = drift_curve(&noisy, &same).unwrap();
        assert!(c.slope.abs() < 1e-9);
        // Growing error: strictly decreasing curve.
        let blur: Vec<Vec<Image>> = (0..5).map(|i| vec![Image::filled(4, 4, [0.5 + 0.02 * (i + 1) as f32; 3])]).collect();
        let c = drift_curve(&blur, &same).unwrap();
        assert!(c.psnr.windows(2).all(|w| w[1].db < w[0].db));
        assert!(c.slope < 0.0);
        assert!(matches!(drift_curve(&same[..2], &same), Err(Error::Contract(_))));
    }

    #[test]
    fn t_test_matches_closed_form() {
        // Differences (0, 0, 3): t = 1 with df = 2, where p = 1 − t/√(2 + t²).
        let a = [1.0, 2.0, 6.0];
        let b = [1.0, 2.0, 3.0];
        let (mean, p) = paired_t_test(&a, &b).unwrap();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((p - (1.0 - 1.0 / 3f64.sqrt())).abs() < 1e-9, "p = {p}");
        // Reversed order has the same p-value.
        assert!((paired_t_test(&b, &a).unwrap().1 - p).abs() < 1e-12);
    }
}
