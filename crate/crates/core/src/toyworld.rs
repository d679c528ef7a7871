//! Procedural multi-camera driving scenes with exact ray-cast rendering.
//!
//! Scenes hold flat-colored cuboids (optionally moving at constant velocity)
//! and lane polylines painted on a checkered ground plane. Everything lives in
//! the global frame, whose origin is the ego pose at time 0.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    add, camera_mount, cross, dot, mat_mul, mat_t_vec, norm, normalize, rot_z, sub, CameraPose, EgoPose, OrientedBox,
    Vec3,
};
use crate::image::Image;

pub const SKY: [f32; 3] = [0.55, 0.75, 0.95];
pub const GROUND: [[f32; 3]; 2] = [[0.36, 0.36, 0.36], [0.44, 0.44, 0.44]];
pub const GROUND_FAR: [f32; 3] = [0.40, 0.40, 0.40];
pub const LANE_DIVIDER: [f32; 3] = [0.95, 0.95, 0.95];
pub const ROAD_EDGE: [f32; 3] = [0.72, 0.72, 0.72];

/// Named cuboid colors; a scene never repeats one.
pub const PALETTE: [(&str, [f32; 3]); 7] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.15, 0.30, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.10, 0.80, 0.80]),
    ("orange", [0.95, 0.50, 0.10]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    /// Box at time 0.
    pub bx: OrientedBox,
    pub velocity: Vec3,
    pub color: [f32; 3],
    /// `cube_<color name>`.
    pub category: String,
}

impl Cuboid {
    pub fn at(&self, time: f64) -> OrientedBox {
        OrientedBox {
            center: add(self.bx.center, crate::geometry::scale(self.velocity, time)),
            ..self.bx
        }
    }

    pub fn is_moving(&self) -> bool {
        norm(self.velocity) > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub category: String,
    pub vertices: Vec<Vec3>,
    pub color: [f32; 3],
    pub width: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPattern {
    pub tile: f64,
    /// Beyond this distance from the camera the ground is drawn in its mean color.
    pub far: f64,
}

impl Default for GroundPattern {
    fn default() -> Self {
        Self { tile: 3.0, far: 40.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub cuboids: Vec<Cuboid>,
    pub lanes: Vec<Lane>,
    pub ground: GroundPattern,
    pub duration: f64,
}

/// One camera of a rig, relative to the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMount {
    pub yaw: f64,
    pub pitch: f64,
    pub offset: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub name: String,
    pub cameras: Vec<CameraMount>,
    pub hfov: f64,
    pub width: usize,
    pub height: usize,
}

impl RigSpec {
    fn ring(name: &str, yaws_deg: &[f64], width: usize, height: usize) -> Self {
        Self {
            name: name.to_string(),
            cameras: yaws_deg
                .iter()
                .map(|&y| CameraMount {
                    yaw: y.to_radians(),
                    pitch: 8f64.to_radians(),
                    offset: [0.0, 0.0, 1.5],
                })
                .collect(),
            hfov: 90f64.to_radians(),
            width,
            height,
        }
    }

    /// Two cameras at ±35° yaw (left first), 90° horizontal field of view.
    pub fn two_view(width: usize, height: usize) -> Self {
        Self::ring("v2", &[35.0, -35.0], width, height)
    }

    /// Three cameras at +60°, 0°, −60° yaw.
    pub fn three_view(width: usize, height: usize) -> Self {
        Self::ring("v3", &[60.0, 0.0, -60.0], width, height)
    }

    pub fn by_name(name: &str, width: usize, height: usize) -> Result<Self> {
        match name {
            "v2" => Ok(Self::two_view(width, height)),
            "v3" => Ok(Self::three_view(width, height)),
            _ => Err(Error::Config(format!("unknown rig `{name}`"))),
        }
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    /// Same rig rotated by `yaw` radians about the ego z axis.
    pub fn rotated(&self, yaw: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.cameras {
            c.yaw += yaw;
            c.offset = crate::geometry::mat_vec(&rot_z(yaw), c.offset);
        }
        out
    }

    pub fn camera_pose(&self, view: usize, ego: &EgoPose) -> CameraPose {
        let m = &self.cameras[view];
        let rotation = mat_mul(&ego.rotation(), &camera_mount(m.yaw, m.pitch));
        CameraPose::with_fov(rotation, ego.to_global(m.offset), self.width, self.height, self.hfov)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Straight,
    Arc,
    Spline,
}

impl TrajectoryKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Arc => "arc",
            Self::Spline => "spline",
        }
    }
}

/// Planar ego path starting at the origin with heading 0, driven at constant speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EgoTrajectory {
    Straight { speed: f64 },
    Arc { speed: f64, turn_rate: f64 },
    /// Catmull-Rom spline through `waypoints` (first at the origin), arc-length parametrized.
    Spline { speed: f64, waypoints: Vec<[f64; 2]> },
}

impl EgoTrajectory {
    pub fn kind(&self) -> TrajectoryKind {
        match self {
            Self::Straight { .. } => TrajectoryKind::Straight,
            Self::Arc { .. } => TrajectoryKind::Arc,
            Self::Spline { .. } => TrajectoryKind::Spline,
        }
    }

    pub fn speed(&self) -> f64 {
        match self {
            Self::Straight { speed } | Self::Arc { speed, .. } | Self::Spline { speed, .. } => *speed,
        }
    }

    pub fn sample(kind: TrajectoryKind, rng: &mut impl Rng) -> Self {
        let speed = rng.gen_range(1.5..3.0);
        match kind {
            TrajectoryKind::Straight => Self::Straight { speed },
            TrajectoryKind::Arc => {
                let rate: f64 = rng.gen_range(0.12..0.3);
                let turn_rate = if rng.gen::<bool>() { rate } else { -rate };
                Self::Arc { speed, turn_rate }
            }
            TrajectoryKind::Spline => {
                let mut pts = vec![[0.0, 0.0], [12.0, 0.0]];
                let mut heading: f64 = 0.0;
                for _ in 0..6 {
                    heading += rng.gen_range(-0.6..0.6);
                    let last = *pts.last().expect("seeded");
                    pts.push([last[0] + 12.0 * heading.cos(), last[1] + 12.0 * heading.sin()]);
                }
                Self::Spline { speed, waypoints: pts }
            }
        }
    }

    pub fn pose(&self, time: f64) -> EgoPose {
        let s = self.speed() * time;
        match self {
            Self::Straight { .. } => EgoPose {
                position: [s, 0.0, 0.0],
                yaw: 0.0,
            },
            Self::Arc { turn_rate, .. } => {
                let yaw = turn_rate * time;
                let r = self.speed() / turn_rate;
                EgoPose {
                    position: [r * yaw.sin(), r * (1.0 - yaw.cos()), 0.0],
                    yaw,
                }
            }
            Self::Spline { waypoints, .. } => spline_pose(waypoints, s),
        }
    }
}

/// Position (`deriv = false`) or tangent (`deriv = true`) of segment `seg` at `u`.
fn catmull_rom(p: &[[f64; 2]], seg: usize, u: f64, deriv: bool) -> [f64; 2] {
    let n = p.len();
    let at = |i: isize| -> [f64; 2] {
        let i = i.clamp(0, n as isize - 1) as usize;
        p[i]
    };
    let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
    let w = if deriv {
        [0.0, 1.0, 2.0 * u, 3.0 * u * u]
    } else {
        [1.0, u, u * u, u * u * u]
    };
    let mut out = [0.0; 2];
    for c in 0..2 {
        out[c] = 0.5
            * (2.0 * p1[c] * w[0]
                + (-p0[c] + p2[c]) * w[1]
                + (2.0 * p0[c] - 5.0 * p1[c] + 4.0 * p2[c] - p3[c]) * w[2]
                + (-p0[c] + 3.0 * p1[c] - 3.0 * p2[c] + p3[c]) * w[3]);
    }
    out
}

const SPLINE_STEPS: usize = 64;

/// Arc length is measured along a dense polyline; the spline parameter is
/// interpolated linearly within each chord. Beyond the last waypoint the path
/// continues straight.
fn spline_pose(p: &[[f64; 2]], s: f64) -> EgoPose {
    let mut acc = 0.0;
    for seg in 0..p.len() - 1 {
        let mut prev = catmull_rom(p, seg, 0.0, false);
        for k in 1..=SPLINE_STEPS {
            let u1 = k as f64 / SPLINE_STEPS as f64;
            let next = catmull_rom(p, seg, u1, false);
            let len = ((next[0] - prev[0]).powi(2) + (next[1] - prev[1]).powi(2)).sqrt();
            if acc + len >= s && len > 0.0 {
                let u = u1 - (1.0 - (s - acc) / len) / SPLINE_STEPS as f64;
                let pos = catmull_rom(p, seg, u, false);
                let tan = catmull_rom(p, seg, u, true);
                return EgoPose {
                    position: [pos[0], pos[1], 0.0],
                    yaw: tan[1].atan2(tan[0]),
                };
            }
            acc += len;
            prev = next;
        }
    }
    let last = p.len() - 2;
    let end = catmull_rom(p, last, 1.0, false);
    let tan = catmull_rom(p, last, 1.0, true);
    let yaw = tan[1].atan2(tan[0]);
    let extra = s - acc;
    EgoPose {
        position: [end[0] + extra * yaw.cos(), end[1] + extra * yaw.sin(), 0.0],
        yaw,
    }
}

/// Knobs for procedural scene sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub min_cuboids: usize,
    pub max_cuboids: usize,
    /// Probability that a cuboid moves.
    pub moving_fraction: f64,
    pub duration: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            min_cuboids: 3,
            max_cuboids: 6,
            moving_fraction: 0.5,
            duration: 20.0,
        }
    }
}

impl SceneSpec {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            cuboids: Vec::new(),
            lanes: Vec::new(),
            ground: GroundPattern::default(),
            duration: 20.0,
        }
    }

    /// Cuboids and lanes laid out along `traj`.
    pub fn generate(seed: u64, traj: &EgoTrajectory, opts: &SceneOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce4e);
        let horizon = traj.speed() * opts.duration + 25.0;
        // Lanes follow the ego path at fixed lateral offsets.
        let path: Vec<EgoPose> = (0..=60)
            .map(|i| traj.pose(i as f64 / 60.0 * (horizon / traj.speed())))
            .collect();
        let lane_at = |offset: f64| -> Vec<Vec3> {
            path.iter()
                .map(|p| p.to_global([0.0, offset, 0.0]))
                .map(|mut v| {
                    v[2] = 0.0;
                    v
                })
                .collect()
        };
        let lanes = vec![
            Lane {
                category: "road_edge".into(),
                vertices: lane_at(2.2),
                color: ROAD_EDGE,
                width: 0.5,
            },
            Lane {
                category: "lane_divider".into(),
                vertices: lane_at(-1.8),
                color: LANE_DIVIDER,
                width: 0.5,
            },
            Lane {
                category: "road_edge".into(),
                vertices: lane_at(-5.8),
                color: ROAD_EDGE,
                width: 0.5,
            },
        ];
        let n = rng.gen_range(opts.min_cuboids..=opts.max_cuboids).min(PALETTE.len());
        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        for i in 0..colors.len() {
            let j = rng.gen_range(i..colors.len());
            colors.swap(i, j);
        }
        let mut cuboids: Vec<Cuboid> = Vec::new();
        let mut attempts = 0;
        while cuboids.len() < n && attempts < 200 {
            attempts += 1;
            let ahead = rng.gen_range(5.0..horizon);
            let base = traj.pose(ahead / traj.speed());
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let lateral = side * rng.gen_range(4.5..10.0);
            let size = [rng.gen_range(2.0..4.0), rng.gen_range(1.8..3.0), rng.gen_range(1.6..3.2)];
            let mut center = base.to_global([0.0, lateral, 0.0]);
            center[2] = size[2] / 2.0;
            let yaw = base.yaw + rng.gen_range(-0.4..0.4);
            let velocity = if rng.gen::<f64>() < opts.moving_fraction {
                let speed = rng.gen_range(0.8..2.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                [speed * base.yaw.cos(), speed * base.yaw.sin(), 0.0]
            } else {
                [0.0; 3]
            };
            let bx = OrientedBox { center, size, yaw };
            // Keep boxes apart at time 0 (velocities are parallel to the local path).
            let clear = cuboids.iter().all(|c| {
                let d = sub(c.bx.center, bx.center);
                (d[0] * d[0] + d[1] * d[1]).sqrt() > 5.5
            });
            if !clear {
                continue;
            }
            let (name, color) = PALETTE[colors[cuboids.len()]];
            cuboids.push(Cuboid {
                bx,
                velocity,
                color,
                category: format!("cube_{name}"),
            });
        }
        Self {
            seed,
            cuboids,
            lanes,
            ground: GroundPattern::default(),
            duration: opts.duration,
        }
    }
}

/// Ray–box intersection in the box frame (slab test). Returns the entry
/// distance, or the exit distance when the origin is inside.
pub fn ray_box(bx: &OrientedBox, o: Vec3, d: Vec3) -> Option<f64> {
    let r = rot_z(bx.yaw);
    let lo = mat_t_vec(&r, sub(o, bx.center));
    let ld = mat_t_vec(&r, d);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for c in 0..3 {
        let half = bx.size[c] / 2.0;
        if ld[c].abs() < 1e-12 {
            if lo[c].abs() > half {
                return None;
            }
            continue;
        }
        let (a, b) = ((-half - lo[c]) / ld[c], (half - lo[c]) / ld[c]);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

fn point_segment_distance_xy(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let u = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (ap[0] - u * ab[0], ap[1] - u * ab[1]);
    (dx * dx + dy * dy).sqrt()
}

/// What a single ray sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Hit {
    Sky,
    Ground { point: Vec3 },
    Lane { index: usize, point: Vec3 },
    Cuboid { index: usize, point: Vec3 },
}

pub fn cast_ray(scene: &SceneSpec, time: f64, o: Vec3, d: Vec3) -> Hit {
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in scene.cuboids.iter().enumerate() {
        if let Some(t) = ray_box(&c.at(time), o, d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    let ground_t = if d[2] < -1e-9 { Some(-o[2] / d[2]) } else { None };
    match (best, ground_t) {
        (Some((t, i)), g) if g.is_none_or(|gt| t < gt) => Hit::Cuboid {
            index: i,
            point: add(o, crate::geometry::scale(d, t)),
        },
        (_, Some(gt)) => {
            let p = add(o, crate::geometry::scale(d, gt));
            let dist = norm(sub(p, o));
            if dist <= scene.ground.far {
                for (li, lane) in scene.lanes.iter().enumerate() {
                    let close = lane
                        .vertices
                        .windows(2)
                        .any(|w| point_segment_distance_xy(p, w[0], w[1]) <= lane.width / 2.0);
                    if close {
                        return Hit::Lane { index: li, point: p };
                    }
                }
            }
            Hit::Ground { point: p }
        }
        _ => Hit::Sky,
    }
}

pub fn hit_color(scene: &SceneSpec, hit: &Hit, camera: Vec3) -> [f32; 3] {
    match hit {
        Hit::Sky => SKY,
        Hit::Cuboid { index, .. } => scene.cuboids[*index].color,
        Hit::Lane { index, .. } => scene.lanes[*index].color,
        Hit::Ground { point } => {
            if norm(sub(*point, camera)) > scene.ground.far {
                GROUND_FAR
            } else {
                let t = scene.ground.tile;
                let parity = ((point[0] / t).floor() + (point[1] / t).floor()).rem_euclid(2.0) as usize;
                GROUND[parity]
            }
        }
    }
}

/// Supersampling factor per pixel axis.
pub const SUPERSAMPLE: usize = 3;

/// Renders one camera.
pub fn render_view(scene: &SceneSpec, pose: &CameraPose, time: f64) -> Image {
    let mut img = Image::filled(pose.width, pose.height, SKY);
    let s = SUPERSAMPLE;
    for y in 0..pose.height {
        for x in 0..pose.width {
            let mut acc = [0.0f64; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let u = x as f64 + (sx as f64 + 0.5) / s as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / s as f64;
                    let d = pose.pixel_direction(u, v);
                    let c = hit_color(scene, &cast_ray(scene, time, pose.center, d), pose.center);
                    for ch in 0..3 {
                        acc[ch] += c[ch] as f64;
                    }
                }
            }
            let n = (s * s) as f64;
            img.set_pixel(x, y, acc.map(|a| (a / n) as f32));
        }
    }
    img
}

/// Per-pixel index of the cuboid hit by the pixel-center ray (occlusion aware).
pub fn render_cuboid_ids(scene: &SceneSpec, pose: &CameraPose, time: f64) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(pose.width * pose.height);
    for y in 0..pose.height {
        for x in 0..pose.width {
            let d = pose.pixel_direction(x as f64 + 0.5, y as f64 + 0.5);
            out.push(match cast_ray(scene, time, pose.center, d) {
                Hit::Cuboid { index, .. } => Some(index),
                _ => None,
            });
        }
    }
    out
}

/// Images and camera poses of all views at one time.
pub fn render_frame(scene: &SceneSpec, rig: &RigSpec, ego: &EgoPose, time: f64) -> (Vec<Image>, Vec<CameraPose>) {
    let poses: Vec<CameraPose> = (0..rig.views()).map(|v| rig.camera_pose(v, ego)).collect();
    let images = poses.iter().map(|p| render_view(scene, p, time)).collect();
    (images, poses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub id: usize,
    pub category: String,
    pub bx: OrientedBox,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapAnnotation {
    pub id: usize,
    pub category: String,
    pub polyline: Vec<Vec3>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub boxes: Vec<BoxAnnotation>,
    pub map: Vec<MapAnnotation>,
    pub text: String,
}

fn count_word(n: usize) -> String {
    const W: [&str; 8] = ["no", "one", "two", "three", "four", "five", "six", "seven"];
    W.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

/// Scene description in a fixed template.
pub fn caption(scene: &SceneSpec, traj: Option<&EgoTrajectory>) -> String {
    let n = scene.cuboids.len();
    let moving = scene.cuboids.iter().filter(|c| c.is_moving()).count();
    let mut s = format!("{} {}", count_word(n), if n == 1 { "cube" } else { "cubes" });
    if moving > 0 {
        let _ = write!(s, " with {} moving", count_word(moving));
    } else {
        s.push_str(" all static");
    }
    if let Some(t) = traj {
        let road = match t {
            EgoTrajectory::Straight { .. } => "straight road",
            EgoTrajectory::Arc { turn_rate, .. } if *turn_rate > 0.0 => "curved road turning left",
            EgoTrajectory::Arc { .. } => "curved road turning right",
            EgoTrajectory::Spline { .. } => "winding road",
        };
        let _ = write!(s, ", {road}");
    }
    s
}

/// Annotations at `time`; map elements farther than `radius` from the ego are omitted.
pub fn annotate_frame(scene: &SceneSpec, ego: &EgoPose, time: f64, text: &str) -> FrameAnnotation {
    const RADIUS: f64 = 60.0;
    let boxes = scene
        .cuboids
        .iter()
        .enumerate()
        .map(|(id, c)| BoxAnnotation {
            id,
            category: c.category.clone(),
            bx: c.at(time),
            color: c.color,
        })
        .collect();
    let map = scene
        .lanes
        .iter()
        .enumerate()
        .filter_map(|(id, l)| {
            let near: Vec<Vec3> = l
                .vertices
                .iter()
                .copied()
                .filter(|v| norm(sub(*v, ego.position)) <= RADIUS)
                .collect();
            (near.len() >= 2).then(|| MapAnnotation {
                id,
                category: l.category.clone(),
                polyline: near,
            })
        })
        .collect();
    FrameAnnotation {
        boxes,
        map,
        text: text.to_string(),
    }
}

/// One rendered timestep.
#[derive(Clone, Debug)]
pub struct Frame {
    pub t_index: usize,
    pub time: f64,
    pub ego: EgoPose,
    pub images: Vec<Image>,
    pub poses: Vec<CameraPose>,
    pub annotation: FrameAnnotation,
}

/// Scene + rig + trajectory + timestamps; renders into frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene: SceneSpec,
    pub rig: RigSpec,
    pub trajectory: EgoTrajectory,
    pub times: Vec<f64>,
}

/// Timestamps starting at 0 with each interval drawn independently from `[lo, hi]`.
pub fn sample_times(rng: &mut impl Rng, frames: usize, interval: (f64, f64)) -> Vec<f64> {
    let mut t = 0.0;
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        if i > 0 {
            t += if interval.1 > interval.0 {
                rng.gen_range(interval.0..=interval.1)
            } else {
                interval.0
            };
        }
        out.push(t);
    }
    out
}

impl Episode {
    pub fn sample(
        seed: u64,
        rig: RigSpec,
        kind: TrajectoryKind,
        frames: usize,
        interval: (f64, f64),
        opts: &SceneOptions,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajectory = EgoTrajectory::sample(kind, &mut rng);
        let times = sample_times(&mut rng, frames, interval);
        let mut opts = opts.clone();
        opts.duration = opts.duration.max(times.last().copied().unwrap_or(0.0));
        let scene = SceneSpec::generate(rng.gen(), &trajectory, &opts);
        Self {
            scene,
            rig,
            trajectory,
            times,
        }
    }

    pub fn caption(&self) -> String {
        caption(&self.scene, Some(&self.trajectory))
    }

    pub fn render_with(&self, rig: &RigSpec) -> Vec<Frame> {
        let text = self.caption();
        self.times
            .iter()
            .enumerate()
            .map(|(t_index, &time)| {
                let ego = self.trajectory.pose(time);
                let (images, poses) = render_frame(&self.scene, rig, &ego, time);
                Frame {
                    t_index,
                    time,
                    ego,
                    images,
                    poses,
                    annotation: annotate_frame(&self.scene, &ego, time, &text),
                }
            })
            .collect()
    }

    pub fn render(&self) -> Vec<Frame> {
        self.render_with(&self.rig)
    }
}

/// Dataset mix for [`build_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n_scenes: usize,
    pub rigs: Vec<RigSpec>,
    pub trajectories: Vec<TrajectoryKind>,
    pub frames: usize,
    pub interval: (f64, f64),
    pub scene: SceneOptions,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn default_mix(n_scenes: usize, frames: usize, seed: u64) -> Self {
        Self {
            n_scenes,
            rigs: vec![RigSpec::two_view(16, 16), RigSpec::three_view(16, 16)],
            trajectories: vec![TrajectoryKind::Straight, TrajectoryKind::Arc, TrajectoryKind::Spline],
            frames,
            interval: (0.1, 1.0),
            scene: SceneOptions::default(),
            seed,
        }
    }

    /// Episode `i` of the mix: rigs and trajectory kinds cycle deterministically.
    pub fn episode(&self, i: usize) -> Episode {
        let rig = self.rigs[i % self.rigs.len()].clone();
        let kind = self.trajectories[(i / self.rigs.len()) % self.trajectories.len()];
        let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        Episode::sample(seed, rig, kind, self.frames, self.interval, &self.scene)
    }
}

pub const MANIFEST_HEADER: &str = "# scene rig views frames trajectory timestamps_s";
pub const POSES_HEADER: &str =
    "# t_index time_s view r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz fx fy cx cy width height";
pub const BOXES_HEADER: &str = "# t_index id category cx cy cz sx sy sz yaw r g b";
pub const MAP_HEADER: &str = "# t_index id category n_points x1 y1 z1 ... xn yn zn";

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

pub fn frame_file(t_index: usize, view: usize) -> String {
    format!("frame_{t_index:03}_view_{view}.ppm")
}

/// Writes one scene directory (images, poses, boxes, map, caption).
pub fn write_scene(dir: &Path, episode: &Episode, frames: &[Frame]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut poses = format!("{POSES_HEADER}\n");
    let mut boxes = format!("{BOXES_HEADER}\n");
    let mut map = format!("{MAP_HEADER}\n");
    for f in frames {
        for (v, (img, p)) in f.images.iter().zip(&f.poses).enumerate() {
            img.save_ppm(&dir.join(frame_file(f.t_index, v)))?;
            let r = &p.rotation;
            let k = &p.intrinsics;
            let _ = writeln!(
                poses,
                "{} {:.6} {} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {} {}",
                f.t_index, f.time, v, r[0][0], r[0][1], r[0][2], p.center[0], r[1][0], r[1][1], r[1][2], p.center[1],
                r[2][0], r[2][1], r[2][2], p.center[2], k.fx, k.fy, k.cx, k.cy, p.width, p.height
            );
        }
        for b in &f.annotation.boxes {
            let _ = writeln!(
                boxes,
                "{} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}",
                f.t_index,
                b.id,
                b.category,
                b.bx.center[0],
                b.bx.center[1],
                b.bx.center[2],
                b.bx.size[0],
                b.bx.size[1],
                b.bx.size[2],
                b.bx.yaw,
                b.color[0],
                b.color[1],
                b.color[2]
            );
        }
        for m in &f.annotation.map {
            let _ = write!(map, "{} {} {} {}", f.t_index, m.id, m.category, m.polyline.len());
            for p in &m.polyline {
                let _ = write!(map, " {:.6} {:.6} {:.6}", p[0], p[1], p[2]);
            }
            map.push('\n');
        }
    }
    write_file(&dir.join("poses"), &poses)?;
    write_file(&dir.join("boxes"), &boxes)?;
    write_file(&dir.join("map"), &map)?;
    write_file(&dir.join("caption"), &format!("{}\n", episode.caption()))?;
    let spec = serde_json::to_string_pretty(episode).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&dir.join("episode.json"), &format!("{spec}\n"))?;
    Ok(())
}

/// Renders and writes every scene of the mix plus the top-level `manifest`.
pub fn build_dataset(spec: &DatasetSpec, out: &Path) -> Result<Vec<PathBuf>> {
    if spec.n_scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut dirs = Vec::new();
    for i in 0..spec.n_scenes {
        let ep = spec.episode(i);
        let frames = ep.render();
        let name = format!("scene_{i:04}");
        let dir = out.join(&name);
        write_scene(&dir, &ep, &frames)?;
        let times: Vec<String> = ep.times.iter().map(|t| format!("{t:.6}")).collect();
        let _ = writeln!(
            manifest,
            "{name} {} {} {} {} {}",
            ep.rig.name,
            ep.rig.views(),
            ep.times.len(),
            ep.trajectory.kind().name(),
            times.join(",")
        );
        dirs.push(dir);
    }
    write_file(&out.join("manifest"), &manifest)?;
    Ok(dirs)
}

/// Reads a scene directory back into frames (images, poses, annotations).
pub fn load_scene(dir: &Path) -> Result<(Episode, Vec<Frame>)> {
    let text = std::fs::read_to_string(dir.join("episode.json"))?;
    let ep: Episode = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let poses_txt = std::fs::read_to_string(dir.join("poses"))?;
    let mut poses: Vec<Vec<CameraPose>> = vec![Vec::new(); ep.times.len()];
    for line in poses_txt.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 21 {
            return Err(Error::Data(format!("bad pose row `{line}`")));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|_| Error::Data(format!("bad number `{}`", f[i]))) };
        let t: usize = f[0].parse().map_err(|_| Error::Data("bad t_index".into()))?;
        let rotation = [
            [num(3)?, num(4)?, num(5)?],
            [num(7)?, num(8)?, num(9)?],
            [num(11)?, num(12)?, num(13)?],
        ];
        let pose = CameraPose {
            rotation,
            center: [num(6)?, num(10)?, num(14)?],
            intrinsics: crate::geometry::Intrinsics {
                fx: num(15)?,
                fy: num(16)?,
                cx: num(17)?,
                cy: num(18)?,
            },
            width: num(19)? as usize,
            height: num(20)? as usize,
        };
        poses.get_mut(t).ok_or_else(|| Error::Data(format!("t_index {t} out of range")))?.push(pose);
    }
    let text_caption = std::fs::read_to_string(dir.join("caption"))?.trim().to_string();
    let mut frames = Vec::new();
    for (t_index, &time) in ep.times.iter().enumerate() {
        let images = (0..ep.rig.views())
            .map(|v| Image::load_ppm(&dir.join(frame_file(t_index, v))))
            .collect::<Result<Vec<_>>>()?;
        let ego = ep.trajectory.pose(time);
        frames.push(Frame {
            t_index,
            time,
            ego,
            images,
            poses: std::mem::take(&mut poses[t_index]),
            annotation: annotate_frame(&ep.scene, &ego, time, &text_caption),
        });
    }
    Ok((ep, frames))
}

/// Reads every scene listed in the `manifest` of a dataset written by [`build_dataset`].
pub fn load_dataset(root: &Path) -> Result<Vec<(Episode, Vec<Frame>)>> {
    let manifest = std::fs::read_to_string(root.join("manifest"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("manifest").display())))?;
    manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let name = l.split_whitespace().next().expect("non-empty line");
            load_scene(&root.join(name))
        })
        .collect()
}

/// Unit normal of the box face a surface point lies on (for tests and diagnostics).
pub fn box_face_normal(bx: &OrientedBox, p: Vec3) -> Vec3 {
    let local = bx.to_object(p);
    let mut best = (0usize, f64::INFINITY);
    for c in 0..3 {
        let gap = (local[c].abs() - bx.size[c] / 2.0).abs();
        if gap < best.1 {
            best = (c, gap);
        }
    }
    let mut n = [0.0; 3];
    n[best.0] = local[best.0].signum();
    crate::geometry::mat_vec(&rot_z(bx.yaw), n)
}

/// Orthogonality check helper used by rig validation.
pub fn mount_is_rigid(rig: &RigSpec) -> bool {
    rig.cameras.iter().all(|m| {
        let r = camera_mount(m.yaw, m.pitch);
        let x = [r[0][0], r[1][0], r[2][0]];
        let y = [r[0][1], r[1][1], r[2][1]];
        let z = [r[0][2], r[1][2], r[2][2]];
        (dot(cross(x, y), z) - 1.0).abs() < 1e-9 && (norm(normalize(x)) - 1.0).abs() < 1e-12
    })
}
