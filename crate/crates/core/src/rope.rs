//! Rotary position codes.
//!
//! A [`RotaryCode`] stores one angle per adjacent dimension pair `(2p, 2p+1)`;
//! applying it rotates each pair, which is the block-diagonal matrix product
//! without materializing the matrix. Three constructors are provided: plain 1D,
//! axial 2D over image coordinates, and the 7D ray code over `(m, d, t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ExtendedRay;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub lambda_t: f64,
    /// Reference grid extent that axial positions are normalized to.
    pub ref_resolution: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            base: 10000.0,
            lambda_m: 10.0,
            lambda_d: 100.0,
            lambda_t: 1.0,
            ref_resolution: 16.0,
        }
    }
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.base, self.lambda_m, self.lambda_d, self.lambda_t, self.ref_resolution];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("rotary factors must be positive: {self:?}")))
        }
    }
}

/// Per-pair rotation angles for a vector of dimension `2 · angles.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotaryCode {
    pub angles: Vec<f64>,
}

impl RotaryCode {
    pub fn identity(dim: usize) -> Self {
        Self {
            angles: vec![0.0; dim / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.angles.len() * 2
    }

    pub fn concat(parts: &[RotaryCode]) -> Self {
        Self {
            angles: parts.iter().flat_map(|p| p.angles.iter().copied()).collect(),
        }
    }

    /// Dense `dim × dim` rotation matrix (row-major); for tests and inspection.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut m = vec![vec![0.0; n]; n];
        for (p, &a) in self.angles.iter().enumerate() {
            let (s, c) = a.sin_cos();
            m[2 * p][2 * p] = c;
            m[2 * p][2 * p + 1] = -s;
            m[2 * p + 1][2 * p] = s;
            m[2 * p + 1][2 * p + 1] = c;
        }
        m
    }

    /// `(cos, sin)` per pair.
    pub fn cos_sin(&self) -> (Vec<f64>, Vec<f64>) {
        self.angles.iter().map(|a| (a.cos(), a.sin())).unzip()
    }
}

/// Pair `p` rotated by `position · base^(−2p/n)`.
pub fn rope_1d(position: f64, n: usize, base: f64) -> Result<RotaryCode> {
    if n % 2 != 0 || n == 0 {
        return Err(Error::Config(format!("rotary dimension {n} must be even and positive")));
    }
    let angles = (0..n / 2)
        .map(|p| position * base.powf(-2.0 * p as f64 / n as f64))
        .collect();
    Ok(RotaryCode { angles })
}

/// Axial code: first half encodes `row · ref / image_h`, second half `col · ref / image_w`.
///
/// `row`/`col` are continuous grid coordinates (cell centers are `i + 0.5`).
pub fn rope_axial_2d(row: f64, col: f64, image_h: f64, image_w: f64, cfg: &RopeConfig, n: usize) -> Result<RotaryCode> {
    if n % 4 != 0 || n == 0 {
        return Err(Error::Config(format!("axial rotary dimension {n} must be divisible by 4")));
    }
    if !(image_h > 0.0 && image_w > 0.0) {
        return Err(Error::Config(format!("zero image extent {image_h}×{image_w}")));
    }
    let r = rope_1d(row * cfg.ref_resolution / image_h, n / 2, cfg.base)?;
    let c = rope_1d(col * cfg.ref_resolution / image_w, n / 2, cfg.base)?;
    Ok(RotaryCode::concat(&[r, c]))
}

/// 7D ray code: three `d/8` blocks for the moment, three `d/8` blocks for the
/// direction, one `d/4` block for time.
pub fn ray_rotation(ray: &ExtendedRay, cfg: &RopeConfig, d: usize) -> Result<RotaryCode> {
    if d % 16 != 0 || d == 0 {
        return Err(Error::Config(format!("ray rotary head dimension {d} must be divisible by 16")));
    }
    let mut parts = Vec::with_capacity(7);
    for c in 0..3 {
        parts.push(rope_1d(cfg.lambda_m * ray.m[c], d / 8, cfg.base)?);
    }
    for c in 0..3 {
        parts.push(rope_1d(cfg.lambda_d * ray.d[c], d / 8, cfg.base)?);
    }
    parts.push(rope_1d(cfg.lambda_t * ray.t, d / 4, cfg.base)?);
    Ok(RotaryCode::concat(&parts))
}

pub fn apply_rotary(code: &RotaryCode, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != code.dim() {
        return Err(Error::Dimension {
            op: "apply_rotary",
            lhs: vec![code.dim()],
            rhs: vec![v.len()],
        });
    }
    let mut out = v.to_vec();
    for (p, &a) in code.angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        let (x0, x1) = (v[2 * p], v[2 * p + 1]);
        out[2 * p] = x0 * c - x1 * s;
        out[2 * p + 1] = x0 * s + x1 * c;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        m.iter().map(|row| dot(row, v)).collect()
    }

    /// Dense `Aᵀ B`.
    fn mat_tn(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| a[k][i] * b[k][j]).sum()).collect())
            .collect()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_ray(rng: &mut ChaCha8Rng) -> ExtendedRay {
        let o = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(0.0..3.0)];
        let d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        ExtendedRay::through(o, d, rng.gen_range(0.0..30.0))
    }

    #[test]
    fn rope_1d_cases() {
        let id = rope_1d(0.0, 8, 10000.0).unwrap();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(apply_rotary(&id, &v).unwrap(), v.to_vec());
        let r = rope_1d(std::f64::consts::FRAC_PI_2, 2, 10000.0).unwrap().to_dense();
        let want = [[0.0, -1.0], [1.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[i][j] - want[i][j]).abs() < 1e-9);
            }
        }
        assert!(matches!(rope_1d(1.0, 7, 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn rope_1d_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (a, b) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
            let (q, k) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
            let lhs = dot(
                &apply_rotary(&rope_1d(a, 8, 10000.0).unwrap(), &q).unwrap(),
                &apply_rotary(&rope_1d(b, 8, 10000.0).unwrap(), &k).unwrap(),
            );
            let rhs = dot(&q, &apply_rotary(&rope_1d(b - a, 8, 10000.0).unwrap(), &k).unwrap());
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn axial_cases() {
        let cfg = RopeConfig::default();
        let id = rope_axial_2d(0.0, 0.0, 4.0, 4.0, &cfg, 16).unwrap();
        assert!(id.angles.iter().all(|&a| a == 0.0));
        assert!(matches!(rope_axial_2d(0.0, 0.0, 0.0, 4.0, &cfg, 16), Err(Error::Config(_))));
        assert!(matches!(rope_axial_2d(0.0, 0.0, 4.0, 4.0, &cfg, 6), Err(Error::Config(_))));
        // Cell (1, 2) center on a 4×4 grid is the same location as (3.0, 5.0) on 8×8.
        let a = rope_axial_2d(1.5, 2.5, 4.0, 4.0, &cfg, 16).unwrap();
        let b = rope_axial_2d(3.0, 5.0, 8.0, 8.0, &cfg, 16).unwrap();
        for (x, y) in a.angles.iter().zip(&b.angles) {
            assert!((x - y).abs() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (r1, c1, r2, c2) = (
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
                rng.gen_range(0.0..8.0),
            );
            let (q, k) = (rand_vec(&mut rng, 16), rand_vec(&mut rng, 16));
            let lhs = dot(
                &apply_rotary(&rope_axial_2d(r1, c1, 8.0, 8.0, &cfg, 16).unwrap(), &q).unwrap(),
                &apply_rotary(&rope_axial_2d(r2, c2, 8.0, 8.0, &cfg, 16).unwrap(), &k).unwrap(),
            );
            let rhs = dot(
                &q,
                &apply_rotary(&rope_axial_2d(r2 - r1, c2 - c1, 8.0, 8.0, &cfg, 16).unwrap(), &k).unwrap(),
            );
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn ray_code_cases() {
        let cfg = RopeConfig::default();
        let zero = ExtendedRay {
            m: [0.0; 3],
            d: [0.0; 3],
            t: 0.0,
        };
        let code = ray_rotation(&zero, &cfg, 32).unwrap();
        assert_eq!(code.dim(), 32);
        assert!(code.angles.iter().all(|&a| a == 0.0));
        assert!(matches!(ray_rotation(&zero, &cfg, 24), Err(Error::Config(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ray = rand_ray(&mut rng);
        let r = ray_rotation(&ray, &cfg, 32).unwrap().to_dense();
        let rtr = mat_tn(&r, &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-6);
            }
        }
        // Block layout: first pair of each block sees the raw scaled coordinate.
        let code = ray_rotation(&ray, &cfg, 32).unwrap();
        let coords = ray.coords();
        let lambdas = [cfg.lambda_m, cfg.lambda_m, cfg.lambda_m, cfg.lambda_d, cfg.lambda_d, cfg.lambda_d, cfg.lambda_t];
        let starts = [0, 2, 4, 6, 8, 10, 12];
        for c in 0..7 {
            assert!((code.angles[starts[c]] - lambdas[c] * coords[c]).abs() < 1e-12);
        }
        let t_block = rope_1d(cfg.lambda_t * ray.t, 8, cfg.base).unwrap();
        assert_eq!(&code.angles[12..16], &t_block.angles[..]);
    }

    #[test]
    fn ray_code_relative_contract() {
        let cfg = RopeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (a, b) = (rand_ray(&mut rng), rand_ray(&mut rng));
            let (q, k) = (rand_vec(&mut rng, 32), rand_vec(&mut rng, 32));
            let ra = ray_rotation(&a, &cfg, 32).unwrap();
            let rb = ray_rotation(&b, &cfg, 32).unwrap();
            let lhs = dot(&apply_rotary(&ra, &q).unwrap(), &apply_rotary(&rb, &k).unwrap());
            let delta = mat_tn(&ra.to_dense(), &rb.to_dense());
            let rhs = dot(&q, &mat_vec(&delta, &k));
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn apply_matches_dense_and_preserves_norm() {
        let cfg = RopeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let code = ray_rotation(&rand_ray(&mut rng), &cfg, 48).unwrap();
            let v = rand_vec(&mut rng, 48);
            let fast = apply_rotary(&code, &v).unwrap();
            let dense = mat_vec(&code.to_dense(), &v);
            for (x, y) in fast.iter().zip(&dense) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((dot(&fast, &fast).sqrt() - dot(&v, &v).sqrt()).abs() < 1e-6);
        }
        assert!(matches!(
            apply_rotary(&RotaryCode::identity(8), &[0.0; 6]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn logits_invariant_to_coordinate_shift() {
        let cfg = RopeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rays: Vec<ExtendedRay> = (0..6).map(|_| rand_ray(&mut rng)).collect();
        let qs: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 32)).collect();
        let ks: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, 32)).collect();
        let logits = |rays: &[ExtendedRay]| -> Vec<f64> {
            let codes: Vec<RotaryCode> = rays.iter().map(|r| ray_rotation(r, &cfg, 32).unwrap()).collect();
            let mut out = Vec::new();
            for i in 0..6 {
                for j in 0..6 {
                    out.push(dot(
                        &apply_rotary(&codes[i], &qs[i]).unwrap(),
                        &apply_rotary(&codes[j], &ks[j]).unwrap(),
                    ));
                }
            }
            out
        };
        let base = logits(&rays);
        let shifts: [(usize, f64); 3] = [(0, 0.37), (1, -0.21), (2, 5.5)];
        for (which, s) in shifts {
            let moved: Vec<ExtendedRay> = rays
                .iter()
                .map(|r| {
                    let mut r = *r;
                    match which {
                        0 => r.m = [r.m[0] + s, r.m[1] - s, r.m[2] + 2.0 * s],
                        1 => r.d = [r.d[0] + s, r.d[1] + s, r.d[2] - s],
                        _ => r.t += s,
                    }
                    r
                })
                .collect();
            for (x, y) in base.iter().zip(logits(&moved)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn far_time_stays_finite() {
        let cfg = RopeConfig::default();
        let ray = ExtendedRay::through([1.0, 2.0, 1.5], [1.0, 0.0, 0.0], 1e6);
        let code = ray_rotation(&ray, &cfg, 32).unwrap();
        let v = vec![0.5; 32];
        let out = apply_rotary(&code, &v).unwrap();
        assert!(out.iter().all(|x| x.is_finite()));
        assert!((dot(&out, &out) - dot(&v, &v)).abs() < 1e-6);
    }
}
