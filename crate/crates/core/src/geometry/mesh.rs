use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Point3, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(c - a).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn max_z(&self) -> Option<f64> {
        self.vertices.iter().map(|v| v.z).reduce(f64::max)
    }

    /// Plain ASCII OBJ.
    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(out, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
        }
        for [a, b, c] in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
        }
        out
    }

    /// OBJ with per-vertex RGB colors (the common `v x y z r g b` extension).
    pub fn to_obj_colored(&self, colors: &[[f32; 3]]) -> String {
        let mut out = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let c = colors.get(i).copied().unwrap_or([0.7, 0.7, 0.7]);
            let _ = writeln!(out, "v {:.6} {:.6} {:.6} {:.3} {:.3} {:.3}", v.x, v.y, v.z, c[0], c[1], c[2]);
        }
        for [a, b, c] in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
        }
        out
    }
}

/// `n` points distributed uniformly over the mesh surface.
pub fn sample_mesh_surface(mesh: &TriangleMesh, n: usize, rng_seed: u64) -> Result<Vec<Point3>> {
    if mesh.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let points = (0..n)
        .map(|_| {
            let r = rng.random_range(0.0..total);
            let t = cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(t);
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let su = u.sqrt();
            a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
        })
        .collect();
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn barycentric(p: Point3, [a, b, c]: [Point3; 3]) -> (f64, f64, f64) {
        let (v0, v1, v2) = (b - a, c - a, p - a);
        let (d00, d01, d11) = (v0.dot(v0), v0.dot(v1), v1.dot(v1));
        let (d20, d21) = (v2.dot(v0), v2.dot(v1));
        let den = d00 * d11 - d01 * d01;
        let v = (d11 * d20 - d01 * d21) / den;
        let w = (d00 * d21 - d01 * d20) / den;
        (1.0 - v - w, v, w)
    }

    #[test]
    fn points_stay_inside_single_triangle() {
        let mesh = TriangleMesh {
            vertices: vec![Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 2.0, 0.5)],
            triangles: vec![[0, 1, 2]],
        };
        for p in sample_mesh_surface(&mesh, 500, 3).unwrap() {
            let (a, b, c) = barycentric(p, mesh.triangle(0));
            assert!(a >= -1e-12 && b >= -1e-12 && c >= -1e-12);
        }
    }

    #[test]
    fn counts_follow_area_ratio() {
        // Areas 1.5 and 0.5.
        let mesh = TriangleMesh {
            vertices: vec![
                Point3::ORIGIN,
                Point3::new(3.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(10.0, 0.0, 0.0),
                Point3::new(11.0, 0.0, 0.0),
                Point3::new(10.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let pts = sample_mesh_surface(&mesh, 4000, 17).unwrap();
        let big = pts.iter().filter(|p| p.x < 5.0).count() as f64;
        // Binomial(4000, 0.75): sd = sqrt(4000 * 0.75 * 0.25) ~ 27.4.
        let sd = (4000.0f64 * 0.75 * 0.25).sqrt();
        assert!((big - 3000.0).abs() < 3.0 * sd, "{big}");
    }

    #[test]
    fn empty_mesh_errors() {
        assert_eq!(sample_mesh_surface(&TriangleMesh::default(), 3, 0), Err(GeometryError::EmptyMesh));
    }

    #[test]
    fn deterministic_per_seed() {
        let mesh = TriangleMesh {
            vertices: vec![Point3::ORIGIN, Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            triangles: vec![[0, 1, 2]],
        };
        assert_eq!(sample_mesh_surface(&mesh, 50, 8).unwrap(), sample_mesh_surface(&mesh, 50, 8).unwrap());
    }
}
