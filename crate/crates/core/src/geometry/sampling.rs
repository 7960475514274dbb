use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Point3, Result, DOMAIN_HALF_EXTENT};

/// A query position with its signed distance (negative inside).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdfSample {
    pub pos: Point3,
    pub dist: f64,
}

impl SdfSample {
    pub fn new(pos: Point3, dist: f64) -> Self {
        Self { pos, dist }
    }
}

/// Uniform (`S_u`) and near-surface (`S_g`) samples of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSampling {
    pub shape_id: u64,
    pub uniform: Vec<SdfSample>,
    pub surface: Vec<SdfSample>,
    pub max_abs_dist_uniform: f64,
    pub max_abs_dist_surface: f64,
}

fn max_abs(samples: &[SdfSample]) -> f64 {
    samples.iter().map(|s| s.dist.abs()).fold(0.0, f64::max)
}

impl ShapeSampling {
    pub fn new(shape_id: u64, uniform: Vec<SdfSample>, surface: Vec<SdfSample>) -> Self {
        let max_abs_dist_uniform = max_abs(&uniform);
        let max_abs_dist_surface = max_abs(&surface);
        Self {
            shape_id,
            uniform,
            surface,
            max_abs_dist_uniform,
            max_abs_dist_surface,
        }
    }

    pub fn uniform_positions(&self) -> Vec<Point3> {
        self.uniform.iter().map(|s| s.pos).collect()
    }

    /// Weights `w(d, S_u)` of the uniform samples.
    pub fn uniform_weights(&self) -> Vec<f64> {
        self.uniform
            .iter()
            .map(|s| self.max_abs_dist_uniform - s.dist.abs())
            .collect()
    }

    /// Weights `w(d, S_g)` of the near-surface samples.
    pub fn surface_weights(&self) -> Vec<f64> {
        self.surface
            .iter()
            .map(|s| self.max_abs_dist_surface - s.dist.abs())
            .collect()
    }
}

/// Weight that favours samples near the surface: `max_abs - |d|`.
pub fn distance_weight(d: f64, max_abs: f64) -> Result<f64> {
    if d.abs() > max_abs {
        return Err(GeometryError::Domain { dist: d, max_abs });
    }
    Ok(max_abs - d.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Standard deviation of the isotropic perturbation applied to surface points.
    pub surface_sigma: f64,
    pub max_march_steps: usize,
    pub min_march_step: f64,
    pub bisection_iters: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            surface_sigma: 0.05,
            max_march_steps: 256,
            min_march_step: 1e-4,
            bisection_iters: 48,
        }
    }
}

fn in_domain(p: Point3) -> bool {
    p.x.abs() <= DOMAIN_HALF_EXTENT && p.y.abs() <= DOMAIN_HALF_EXTENT && p.z.abs() <= DOMAIN_HALF_EXTENT
}

fn random_in_domain<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    let h = DOMAIN_HALF_EXTENT;
    Point3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Point3 {
    loop {
        let v = Point3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v * (1.0 / n);
        }
    }
}

/// `n` positions drawn uniformly from the sampling domain.
pub fn uniform_positions<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Point3> {
    (0..n).map(|_| random_in_domain(rng)).collect()
}

/// Marches from `start` along `dir` until the sign of the field flips, then
/// bisects the bracketing interval.
fn march_to_surface<F: Fn(Point3) -> f64>(sdf: &F, start: Point3, dir: Point3, cfg: &SamplingConfig) -> Option<Point3> {
    let d0 = sdf(start);
    if d0 == 0.0 {
        return Some(start);
    }
    let mut t = 0.0;
    let mut d = d0;
    for _ in 0..cfg.max_march_steps {
        let t_next = t + d.abs().max(cfg.min_march_step);
        let p = start + dir * t_next;
        if !in_domain(p) {
            return None;
        }
        let d_next = sdf(p);
        if d_next.signum() != d0.signum() || d_next == 0.0 {
            let (mut lo, mut hi) = (t, t_next);
            for _ in 0..cfg.bisection_iters {
                let mid = 0.5 * (lo + hi);
                if sdf(start + dir * mid).signum() == d0.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(start + dir * (0.5 * (lo + hi)));
        }
        t = t_next;
        d = d_next;
    }
    None
}

/// Approximate on-surface points found by marching random rays from random
/// domain points until they cross the zero level set.
pub fn sample_surface_points<F: Fn(Point3) -> f64, R: Rng + ?Sized>(
    sdf: &F,
    n: usize,
    rng: &mut R,
    cfg: &SamplingConfig,
) -> Result<Vec<Point3>> {
    let max_attempts = 1000 * n + 10_000;
    let mut found = Vec::with_capacity(n);
    let mut attempts = 0;
    while found.len() < n && attempts < max_attempts {
        attempts += 1;
        let start = random_in_domain(rng);
        let dir = random_unit(rng);
        if let Some(p) = march_to_surface(sdf, start, dir, cfg) {
            found.push(p);
        }
    }
    if found.is_empty() {
        return Err(GeometryError::SurfaceNotFound);
    }
    let hits = found.len();
    for i in hits..n {
        found.push(found[i % hits]);
    }
    Ok(found)
}

/// Samples a shape's distance field: `n_uniform` points uniform in the domain
/// (or exactly `shared_positions`) plus `n_surface` surface points perturbed by
/// isotropic Gaussian noise.
pub fn sample_shape<F: Fn(Point3) -> f64>(
    sdf: &F,
    n_uniform: usize,
    n_surface: usize,
    shared_positions: Option<&[Point3]>,
    rng_seed: u64,
    cfg: &SamplingConfig,
) -> Result<ShapeSampling> {
    if n_uniform == 0 || n_surface == 0 {
        return Err(GeometryError::InvalidArgument("sample counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let positions = match shared_positions {
        Some(p) if p.len() != n_uniform => {
            return Err(GeometryError::InvalidArgument(format!(
                "{} shared positions for {n_uniform} uniform samples",
                p.len()
            )))
        }
        Some(p) => p.to_vec(),
        None => uniform_positions(n_uniform, &mut rng),
    };
    let uniform = positions.iter().map(|&p| SdfSample::new(p, sdf(p))).collect();
    let on_surface = sample_surface_points(sdf, n_surface, &mut rng, cfg)?;
    let surface = on_surface
        .into_iter()
        .map(|p| {
            let noise = Point3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let q = p + noise * cfg.surface_sigma;
            SdfSample::new(q, sdf(q))
        })
        .collect();
    Ok(ShapeSampling::new(0, uniform, surface))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> impl Fn(Point3) -> f64 {
        move |p: Point3| p.norm() - r
    }

    #[test]
    fn inside_fraction_matches_volume_ratio() {
        let s = sample_shape(&sphere(0.5), 4096, 64, None, 3, &SamplingConfig::default()).unwrap();
        let inside = s.uniform.iter().filter(|x| x.dist < 0.0).count() as f64 / 4096.0;
        let expect = 4.0 / 3.0 * std::f64::consts::PI * 0.125 / 2.2f64.powi(3);
        assert!((expect - 0.049).abs() < 0.001);
        assert!((inside - expect).abs() < 0.01, "{inside} vs {expect}");
        assert!(s.uniform.iter().all(|x| in_domain(x.pos)));
    }

    #[test]
    fn shared_positions_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shared = uniform_positions(32, &mut rng);
        let s = sample_shape(&sphere(0.4), 32, 8, Some(&shared), 9, &SamplingConfig::default()).unwrap();
        assert_eq!(s.uniform_positions(), shared);
        assert!(sample_shape(&sphere(0.4), 31, 8, Some(&shared), 9, &SamplingConfig::default()).is_err());
    }

    #[test]
    fn surface_noise_has_half_normal_mean() {
        let s = sample_shape(&sphere(0.5), 16, 4000, None, 11, &SamplingConfig::default()).unwrap();
        let mean = s.surface.iter().map(|x| x.dist.abs()).sum::<f64>() / 4000.0;
        let expect = 0.05 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((expect - 0.0399).abs() < 1e-4);
        assert!((mean - expect).abs() < 0.005, "{mean} vs {expect}");
    }

    #[test]
    fn surface_points_lie_on_level_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = sample_surface_points(&sphere(0.3), 200, &mut rng, &SamplingConfig::default()).unwrap();
        assert!(pts.iter().all(|p| (p.norm() - 0.3).abs() < 1e-9));
    }

    #[test]
    fn empty_shape_fails() {
        let empty = |_: Point3| 1.0;
        let err = sample_shape(&empty, 8, 4, None, 0, &SamplingConfig::default()).unwrap_err();
        assert_eq!(err, GeometryError::SurfaceNotFound);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_shape(&sphere(0.5), 128, 64, None, 42, &SamplingConfig::default()).unwrap();
        let b = sample_shape(&sphere(0.5), 128, 64, None, 42, &SamplingConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights() {
        assert_eq!(distance_weight(0.0, 1.1).unwrap(), 1.1);
        assert_eq!(distance_weight(1.1, 1.1).unwrap(), 0.0);
        assert!((distance_weight(-0.3, 1.2).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(distance_weight(1.5, 1.2), Err(GeometryError::Domain { .. })));
        let s = sample_shape(&sphere(0.5), 64, 32, None, 2, &SamplingConfig::default()).unwrap();
        for (w, x) in s.uniform_weights().iter().zip(&s.uniform) {
            assert!((w + x.dist.abs() - s.max_abs_dist_uniform).abs() < 1e-15);
            assert!(*w >= 0.0);
        }
    }
}
