//! Pinhole cameras, extended Plücker rays and image-space projection.
//!
//! Conventions:
//! - global frame: origin at the ego position of the first timestep, x forward,
//!   y left, z up (meters);
//! - ego frame: same axes attached to the vehicle;
//! - camera frame: x right, y down, z forward; `CameraPose::rotation` maps
//!   camera axes to global axes and `CameraPose::center` is the optical center;
//! - pixel coordinates are continuous, pixel `(c, r)` covers `[c, c+1) × [r, r+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j][i] = v;
        }
    }
    out
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about the global z axis.
pub fn rot_z(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about the y axis.
pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Camera-to-ego rotation for a camera looking along ego heading `yaw`, tilted
/// down by `pitch` radians.
pub fn camera_mount(yaw: f64, pitch: f64) -> Mat3 {
    // Columns: camera x (right), y (down), z (forward) expressed in ego axes.
    let base = [[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
    // Pitch about the camera x axis, positive tilts the view down.
    let (s, c) = pitch.sin_cos();
    let tilt = [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]];
    mat_mul(&rot_z(yaw), &mat_mul(&base, &tilt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Extrinsic (camera→global) and intrinsic parameters of one view at one time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub center: Vec3,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    /// Camera of size `width × height` with horizontal field of view `hfov` (radians)
    /// and the principal point at the image center.
    pub fn with_fov(rotation: Mat3, center: Vec3, width: usize, height: usize, hfov: f64) -> Self {
        let fx = width as f64 / 2.0 / (hfov / 2.0).tan();
        Self {
            rotation,
            center,
            intrinsics: Intrinsics {
                fx,
                fy: fx,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
            },
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite() && k.cx.is_finite() && k.cy.is_finite())
        {
            return Err(Error::Geometry(format!("degenerate intrinsics {k:?}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry("zero image extent".into()));
        }
        let r = &self.rotation;
        let rtr = mat_mul(&transpose(r), r);
        let id = identity();
        let orth = (0..3).all(|i| (0..3).all(|j| (rtr[i][j] - id[i][j]).abs() < 1e-6));
        if !orth || (det(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Geometry("rotation is not orthonormal with det +1".into()));
        }
        Ok(())
    }

    /// Same pose translated by `shift` in global coordinates.
    pub fn translated(&self, shift: Vec3) -> Self {
        Self {
            center: add(self.center, shift),
            ..*self
        }
    }

    /// Unit direction (global) of the ray through pixel coordinate `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        normalize(mat_vec(&self.rotation, cam))
    }

    /// Pixel position of the point at `depth` (camera z) along pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth];
        add(mat_vec(&self.rotation, cam), self.center)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(p, self.center))
    }
}

/// `(m, d, t)`: moment, unit direction and time in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRay {
    pub m: Vec3,
    pub d: Vec3,
    pub t: f64,
}

impl ExtendedRay {
    /// Ray through point `o` with direction `d` (normalized here).
    pub fn through(o: Vec3, d: Vec3, t: f64) -> Self {
        let d = normalize(d);
        Self { m: cross(o, d), d, t }
    }

    /// The 7 coordinates `(m1, m2, m3, d1, d2, d3, t)`.
    pub fn coords(&self) -> [f64; 7] {
        [self.m[0], self.m[1], self.m[2], self.d[0], self.d[1], self.d[2], self.t]
    }
}

/// Ego vehicle pose in the global frame (planar: position plus heading).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub position: Vec3,
    pub yaw: f64,
}

impl EgoPose {
    pub fn rotation(&self) -> Mat3 {
        rot_z(self.yaw)
    }

    /// Global point → ego coordinates.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation(), sub(p, self.position))
    }

    pub fn to_global(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation(), p), self.position)
    }

    /// Ray re-expressed in this ego frame (time unchanged).
    pub fn local_ray(&self, pose: &CameraPose, global: &ExtendedRay) -> ExtendedRay {
        let o = self.to_local(pose.center);
        let d = mat_t_vec(&self.rotation(), global.d);
        ExtendedRay::through(o, d, global.t)
    }
}

/// Reference transform fixing the global origin (ego pose at the first timestep
/// expressed in some external "arena" frame). Set once per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldFrame {
    pub origin: EgoPose,
}

impl WorldFrame {
    pub fn from_first_ego(first: EgoPose) -> Self {
        Self { origin: first }
    }

    pub fn arena_to_global(&self, p: Vec3) -> Vec3 {
        self.origin.to_local(p)
    }

    pub fn arena_yaw_to_global(&self, yaw: f64) -> f64 {
        yaw - self.origin.yaw
    }
}

/// Pixel coordinate of the center of cell `(i, j)` on an `h × w` grid covering the image.
pub fn cell_center(pose: &CameraPose, grid: (usize, usize), cell: (usize, usize)) -> (f64, f64) {
    let u = (cell.1 as f64 + 0.5) * pose.width as f64 / grid.1 as f64;
    let v = (cell.0 as f64 + 0.5) * pose.height as f64 / grid.0 as f64;
    (u, v)
}

/// Extended Plücker ray through the center of cell `(i, j)` of an `h_k × w_k` grid.
pub fn token_ray(pose: &CameraPose, grid: (usize, usize), cell: (usize, usize), time_s: f64) -> Result<ExtendedRay> {
    pose.validate()?;
    if grid.0 == 0 || grid.1 == 0 || cell.0 >= grid.0 || cell.1 >= grid.1 {
        return Err(Error::Contract(format!("cell {cell:?} outside grid {grid:?}")));
    }
    let (u, v) = cell_center(pose, grid, cell);
    Ok(ExtendedRay::through(pose.center, pose.pixel_direction(u, v), time_s))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub in_front: bool,
}

/// Pinhole projection of a global point. Points at or behind the camera plane
/// are flagged (`in_front = false`); their `(u, v)` is the mirrored projection.
pub fn project_point(pose: &CameraPose, p: Vec3) -> Projection {
    let c = pose.to_camera(p);
    let k = &pose.intrinsics;
    let z = if c[2].abs() < 1e-12 { 1e-12_f64.copysign(c[2]) } else { c[2] };
    Projection {
        u: k.fx * c[0] / z + k.cx,
        v: k.fy * c[1] / z + k.cy,
        in_front: c[2] > 1e-9,
    }
}

/// Expansion of the image rectangle, as a fraction of each dimension, used for visibility tests.
pub const VISIBILITY_EXPANSION: f64 = 0.2;

pub fn inside_expanded(pose: &CameraPose, pr: &Projection) -> bool {
    let (w, h) = (pose.width as f64, pose.height as f64);
    pr.in_front
        && pr.u >= -VISIBILITY_EXPANSION * w
        && pr.u <= (1.0 + VISIBILITY_EXPANSION) * w
        && pr.v >= -VISIBILITY_EXPANSION * h
        && pr.v <= (1.0 + VISIBILITY_EXPANSION) * h
}

/// Oriented 3D box; `size` is (length along heading, width, height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl OrientedBox {
    /// Corners in object-frame order z-major, then y, then x:
    /// index = 4·[z>0] + 2·[y>0] + [x>0].
    pub fn corners(&self) -> [Vec3; 8] {
        let r = rot_z(self.yaw);
        let mut out = [[0.0; 3]; 8];
        for (n, c) in out.iter_mut().enumerate() {
            let sx = if n & 1 == 1 { 0.5 } else { -0.5 };
            let sy = if n & 2 == 2 { 0.5 } else { -0.5 };
            let sz = if n & 4 == 4 { 0.5 } else { -0.5 };
            let local = [sx * self.size[0], sy * self.size[1], sz * self.size[2]];
            *c = add(mat_vec(&r, local), self.center);
        }
        out
    }

    /// Point in the box frame (axis aligned, centered).
    pub fn to_object(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&rot_z(self.yaw), sub(p, self.center))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxProjection {
    pub corners: [Projection; 8],
    pub visible: bool,
}

impl BoxProjection {
    /// Axis-aligned 2D bounding rectangle `(u_min, v_min, u_max, v_max)` of the in-front corners.
    pub fn bounding_rect(&self) -> Option<(f64, f64, f64, f64)> {
        let front: Vec<&Projection> = self.corners.iter().filter(|c| c.in_front).collect();
        if front.is_empty() {
            return None;
        }
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&Projection) -> f64| {
            front.iter().map(|c| sel(c)).fold(init, f)
        };
        Some((
            fold(f64::min, f64::INFINITY, |c| c.u),
            fold(f64::min, f64::INFINITY, |c| c.v),
            fold(f64::max, f64::NEG_INFINITY, |c| c.u),
            fold(f64::max, f64::NEG_INFINITY, |c| c.v),
        ))
    }
}

pub fn box_corners_image(bx: &OrientedBox, pose: &CameraPose) -> BoxProjection {
    let corners = bx.corners().map(|c| project_point(pose, c));
    let visible = corners.iter().any(|c| inside_expanded(pose, c));
    BoxProjection { corners, visible }
}

/// `n` points at equal arc-length spacing along the polyline, both endpoints included.
pub fn sample_map_points(polyline: &[Vec3], n: usize) -> Result<Vec<Vec3>> {
    if polyline.len() < 2 || n < 2 {
        return Err(Error::Contract(format!(
            "need ≥2 vertices and n ≥ 2, got {} vertices, n = {n}",
            polyline.len()
        )));
    }
    let seg: Vec<f64> = polyline.windows(2).map(|w| norm(sub(w[1], w[0]))).collect();
    let total: f64 = seg.iter().sum();
    if total <= 1e-12 {
        return Err(Error::Geometry("zero-length polyline".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut s_idx = 0;
    let mut s_start = 0.0;
    for q in 0..n {
        let target = total * q as f64 / (n - 1) as f64;
        while s_idx + 1 < seg.len() && s_start + seg[s_idx] < target {
            s_start += seg[s_idx];
            s_idx += 1;
        }
        let a = if seg[s_idx] > 0.0 {
            ((target - s_start) / seg[s_idx]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (p0, p1) = (polyline[s_idx], polyline[s_idx + 1]);
        out.push(add(p0, scale(sub(p1, p0), a)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn canonical() -> CameraPose {
        CameraPose {
            rotation: identity(),
            center: [0.0; 3],
            intrinsics: Intrinsics {
                fx: 8.0,
                fy: 8.0,
                cx: 8.0,
                cy: 8.0,
            },
            width: 16,
            height: 16,
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        let a = rng.gen_range(-3.0..3.0);
        let b = rng.gen_range(-0.6..0.6);
        mat_mul(&rot_z(a), &rot_y(b))
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let mut p = canonical();
        p.rotation = random_rotation(rng);
        p.center = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.0..3.0)];
        p.intrinsics.fx = rng.gen_range(5.0..20.0);
        p.intrinsics.fy = rng.gen_range(5.0..20.0);
        p
    }

    #[test]
    fn token_ray_trivial_cases() {
        let r = token_ray(&canonical(), (1, 1), (0, 0), 0.0).unwrap();
        assert_eq!(r.d, [0.0, 0.0, 1.0]);
        assert_eq!(r.m, [0.0, 0.0, 0.0]);
        let r = ExtendedRay::through([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 0.0);
        assert_eq!(r.m, [0.0, -1.0, 0.0]);
    }

    #[test]
    fn token_ray_errors() {
        let mut p = canonical();
        assert!(matches!(token_ray(&p, (2, 2), (2, 0), 0.0), Err(Error::Contract(_))));
        p.intrinsics.fx = 0.0;
        assert!(matches!(token_ray(&p, (2, 2), (0, 0), 0.0), Err(Error::Geometry(_))));
    }

    #[test]
    fn token_ray_reprojects_to_cell_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let cell = (rng.gen_range(0..h), rng.gen_range(0..w));
            let ray = token_ray(&pose, (h, w), cell, 0.0).unwrap();
            let (u0, v0) = cell_center(&pose, (h, w), cell);
            for s in [1.0, 10.0] {
                let p = add(pose.center, scale(ray.d, s));
                let pr = project_point(&pose, p);
                assert!(pr.in_front);
                assert!((pr.u - u0).abs() < 1e-4 && (pr.v - v0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn project_point_cases() {
        let p = project_point(&canonical(), [0.0, 0.0, 1.0]);
        assert_eq!((p.u, p.v, p.in_front), (8.0, 8.0, true));
        assert!(!project_point(&canonical(), [0.0, 0.0, -1.0]).in_front);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let pt = add(
                pose.center,
                mat_vec(&pose.rotation, [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.5..20.0)]),
            );
            let depth = pose.to_camera(pt)[2];
            let pr = project_point(&pose, pt);
            let back = pose.unproject(pr.u, pr.v, depth);
            assert!(norm(sub(back, pt)) < 1e-5);
        }
    }

    #[test]
    fn box_projection_cases() {
        let bx = OrientedBox {
            center: [0.0, 0.0, 5.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
        };
        let pr = box_corners_image(&bx, &canonical());
        assert!(pr.visible);
        // Mirror pairs (x flipped) are symmetric about cx; (y flipped) about cy.
        for n in 0..8 {
            let mx = pr.corners[n ^ 1];
            let my = pr.corners[n ^ 2];
            assert!((pr.corners[n].u + mx.u - 16.0).abs() < 1e-12);
            assert!((pr.corners[n].v + my.v - 16.0).abs() < 1e-12);
        }
        let behind = OrientedBox {
            center: [0.0, 0.0, -5.0],
            ..bx
        };
        assert!(!box_corners_image(&behind, &canonical()).visible);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let bx = OrientedBox {
                center: add(pose.center, mat_vec(&pose.rotation, [0.0, 0.0, rng.gen_range(4.0..15.0)])),
                size: [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)],
                yaw: rng.gen_range(-3.0..3.0),
            };
            let pr = box_corners_image(&bx, &pose);
            let per: Vec<Projection> = bx.corners().iter().map(|&c| project_point(&pose, c)).collect();
            let front: Vec<&Projection> = per.iter().filter(|p| p.in_front).collect();
            let want = (
                front.iter().map(|p| p.u).fold(f64::INFINITY, f64::min),
                front.iter().map(|p| p.v).fold(f64::INFINITY, f64::min),
                front.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max),
                front.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max),
            );
            assert_eq!(pr.bounding_rect().unwrap(), want);
        }
    }

    #[test]
    fn map_sampling_cases() {
        let pts = sample_map_points(&[[0.0; 3], [1.0, 0.0, 0.0]], 3).unwrap();
        assert_eq!(pts, vec![[0.0; 3], [0.5, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let line = [[0.0, 1.0, 0.0], [3.0, 5.0, 0.0]];
        assert_eq!(sample_map_points(&line, 2).unwrap(), line.to_vec());
        assert!(matches!(
            sample_map_points(&[[1.0; 3], [1.0; 3]], 4),
            Err(Error::Geometry(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n_v = rng.gen_range(2..7);
            let poly: Vec<Vec3> = (0..n_v)
                .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0])
                .collect();
            let n = rng.gen_range(2..20);
            let pts = sample_map_points(&poly, n).unwrap();
            assert_eq!(pts[0], poly[0]);
            assert!(norm(sub(pts[n - 1], poly[n_v - 1])) < 1e-9);
            // Arc-length oracle: position of each sample along the polyline.
            let arc = |p: Vec3| -> f64 {
                let mut acc = 0.0;
                let mut best = (f64::INFINITY, 0.0);
                for w in poly.windows(2) {
                    let seg = sub(w[1], w[0]);
                    let len = norm(seg);
                    let a = (dot(sub(p, w[0]), seg) / (len * len)).clamp(0.0, 1.0);
                    let dist = norm(sub(add(w[0], scale(seg, a)), p));
                    if dist < best.0 - 1e-12 {
                        best = (dist, acc + a * len);
                    }
                    acc += len;
                }
                best.1
            };
            let s: Vec<f64> = pts.iter().map(|&p| arc(p)).collect();
            let gap = s[1] - s[0];
            for w in s.windows(2) {
                assert!((w[1] - w[0] - gap).abs() < 1e-6, "{s:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn rays_are_unit_and_orthogonal(
            yaw in -3.0f64..3.0, pitch in -0.5f64..0.5,
            cx in -20.0f64..20.0, cy in -20.0f64..20.0, cz in -5.0f64..5.0,
            i in 0usize..8, j in 0usize..8, t in 0.0f64..100.0,
        ) {
            let mut pose = canonical();
            pose.rotation = camera_mount(yaw, pitch);
            pose.center = [cx, cy, cz];
            let ray = token_ray(&pose, (8, 8), (i, j), t).unwrap();
            prop_assert!((norm(ray.d) - 1.0).abs() < 1e-6);
            prop_assert!(dot(ray.m, ray.d).abs() < 1e-6);
        }

        #[test]
        fn moment_invariant_to_sliding_along_ray(s in -10.0f64..10.0, yaw in -3.0f64..3.0, i in 0usize..4, j in 0usize..4) {
            let mut pose = canonical();
            pose.rotation = camera_mount(yaw, 0.1);
            pose.center = [1.0, -2.0, 1.5];
            let a = token_ray(&pose, (4, 4), (i, j), 0.0).unwrap();
            let moved = pose.translated(scale(a.d, s));
            let b = token_ray(&moved, (4, 4), (i, j), 0.0).unwrap();
            for c in 0..3 {
                prop_assert!((a.m[c] - b.m[c]).abs() < 1e-9);
                prop_assert!((a.d[c] - b.d[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nested_scale_centers_share_rays() {
        // A 1×1 grid and a 3×3 grid share the image center.
        let mut pose = canonical();
        pose.rotation = camera_mount(0.4, 0.2);
        pose.center = [2.0, 1.0, 1.5];
        let a = token_ray(&pose, (1, 1), (0, 0), 0.0).unwrap();
        let b = token_ray(&pose, (3, 3), (1, 1), 0.0).unwrap();
        for c in 0..3 {
            assert!((a.d[c] - b.d[c]).abs() < 1e-6 && (a.m[c] - b.m[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn camera_mount_is_rigid_and_looks_forward() {
        let r = camera_mount(0.0, 0.0);
        assert!((det(&r) - 1.0).abs() < 1e-12);
        assert_eq!(mat_vec(&r, [0.0, 0.0, 1.0]), [1.0, 0.0, 0.0]);
        let p = CameraPose::with_fov(camera_mount(0.3, 0.1), [0.0, 0.0, 1.5], 16, 16, 1.5);
        p.validate().unwrap();
    }

    #[test]
    fn local_ray_invariant_under_ego_translation() {
        let mount = camera_mount(0.5, 0.1);
        let ego_a = EgoPose { position: [0.0; 3], yaw: 0.0 };
        let ego_b = EgoPose { position: [3.0, -1.0, 0.0], yaw: 0.0 };
        let cam = |e: &EgoPose| CameraPose::with_fov(mat_mul(&e.rotation(), &mount), e.to_global([0.5, 0.0, 1.5]), 16, 16, 1.5);
        let (pa, pb) = (cam(&ego_a), cam(&ego_b));
        let ra = token_ray(&pa, (4, 4), (1, 2), 0.0).unwrap();
        let rb = token_ray(&pb, (4, 4), (1, 2), 0.5).unwrap();
        assert_ne!(ra.m, rb.m);
        let la = ego_a.local_ray(&pa, &ra);
        let lb = ego_b.local_ray(&pb, &rb);
        for c in 0..3 {
            assert!((la.m[c] - lb.m[c]).abs() < 1e-12 && (la.d[c] - lb.d[c]).abs() < 1e-12);
        }
    }
}
