use std::collections::HashMap;

use super::mc_tables::{EDGE_TABLE, TRI_TABLE};
use super::{GeometryError, Point3, Result, TriangleMesh, DOMAIN_HALF_EXTENT};

const CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (1, 0, 0),
    (1, 1, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 0, 1),
    (1, 1, 1),
    (0, 1, 1),
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Scalar samples on the `(resolution + 1)^3` lattice spanning the sampling domain.
///
/// Points are stored x-fastest: `index = i + n * (j + n * k)` with `n = resolution + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    resolution: usize,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn cell_width(resolution: usize) -> f64 {
        2.0 * DOMAIN_HALF_EXTENT / resolution as f64
    }

    fn coord(resolution: usize, i: usize) -> f64 {
        -DOMAIN_HALF_EXTENT + i as f64 * Self::cell_width(resolution)
    }

    /// Lattice positions in storage order.
    pub fn positions(resolution: usize) -> Vec<Point3> {
        let n = resolution + 1;
        let mut out = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    out.push(Point3::new(
                        Self::coord(resolution, i),
                        Self::coord(resolution, j),
                        Self::coord(resolution, k),
                    ));
                }
            }
        }
        out
    }

    pub fn from_values(resolution: usize, values: Vec<f64>) -> Result<Self> {
        let n = resolution + 1;
        if resolution < 1 || values.len() != n * n * n {
            return Err(GeometryError::InvalidArgument(format!(
                "grid of resolution {resolution} needs {} values, got {}",
                n * n * n,
                values.len()
            )));
        }
        Ok(Self { resolution, values })
    }

    pub fn from_fn<F: Fn(Point3) -> f64>(resolution: usize, f: F) -> Self {
        let values = Self::positions(resolution).into_iter().map(f).collect();
        Self { resolution, values }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.resolution + 1;
        i + n * (j + n * k)
    }

    fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        let r = self.resolution;
        Point3::new(Self::coord(r, i), Self::coord(r, j), Self::coord(r, k))
    }
}

/// Extracts the `level` isosurface of `sdf` on a `resolution^3` cell grid.
pub fn marching_cubes<F: Fn(Point3) -> f64>(sdf: F, resolution: usize, level: f64) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(GeometryError::InvalidArgument(format!("resolution {resolution} below 8")));
    }
    marching_cubes_grid(&ScalarGrid::from_fn(resolution, sdf), level)
}

/// Marching cubes on pre-evaluated lattice values.
pub fn marching_cubes_grid(grid: &ScalarGrid, level: f64) -> Result<TriangleMesh> {
    let r = grid.resolution;
    let mut mesh = TriangleMesh::default();
    // Lattice edge (lower point index, axis) -> mesh vertex.
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();

    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                let mut corner_idx = [0usize; 8];
                let mut corner_val = [0f64; 8];
                let mut case = 0usize;
                for (c, &(di, dj, dk)) in CORNERS.iter().enumerate() {
                    let idx = grid.index(i + di, j + dj, k + dk);
                    corner_idx[c] = idx;
                    corner_val[c] = grid.values[idx];
                    if corner_val[c] < level {
                        case |= 1 << c;
                    }
                }
                let edges = EDGE_TABLE[case];
                if edges == 0 {
                    continue;
                }
                let mut cube_vertex = [u32::MAX; 12];
                for (e, &(a, b)) in EDGES.iter().enumerate() {
                    if edges & (1 << e) == 0 {
                        continue;
                    }
                    let (ia, ib) = (corner_idx[a], corner_idx[b]);
                    let (lo, hi, va, vb, ca, cb) = if ia < ib {
                        (ia, ib, corner_val[a], corner_val[b], CORNERS[a], CORNERS[b])
                    } else {
                        (ib, ia, corner_val[b], corner_val[a], CORNERS[b], CORNERS[a])
                    };
                    let axis = match hi - lo {
                        1 => 0u8,
                        d if d == r + 1 => 1,
                        _ => 2,
                    };
                    let id = *edge_vertex.entry((lo, axis)).or_insert_with(|| {
                        let pa = grid.point(i + ca.0, j + ca.1, k + ca.2);
                        let pb = grid.point(i + cb.0, j + cb.1, k + cb.2);
                        let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
                        mesh.vertices.push(pa.lerp(pb, t));
                        (mesh.vertices.len() - 1) as u32
                    });
                    cube_vertex[e] = id;
                }
                for tri in TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        cube_vertex[tri[0] as usize],
                        cube_vertex[tri[1] as usize],
                        cube_vertex[tri[2] as usize],
                    ];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    let [a, b, c] = t.map(|v| mesh.vertices[v as usize]);
                    if 0.5 * (b - a).cross(c - a).norm() <= MIN_TRIANGLE_AREA {
                        continue;
                    }
                    mesh.triangles.push(t);
                }
            }
        }
    }

    if mesh.triangles.is_empty() {
        return Err(GeometryError::EmptyLevelSet { level });
    }
    Ok(mesh)
}
