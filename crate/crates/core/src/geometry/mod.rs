//! Geometric substrate: analytic SDFs, sampling, point-set metrics and
//! isosurface extraction.
//!
//! All shapes live in a normalized world frame where the largest
//! bounding-box edge is 2 units and the sampling domain is `[-1.1, 1.1]^3`.

mod marching_cubes;
mod mc_tables;
mod mesh;
mod metrics;
pub(crate) use metrics::KdTree;
mod sampling;
mod shapes;
pub(crate) use shapes::round_f32;

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use marching_cubes::{marching_cubes, marching_cubes_grid, ScalarGrid};
pub use mesh::{sample_mesh_surface, TriangleMesh};
pub use metrics::{
    chamfer_distance, directed_mean_distance, farthest_point_sampling,
    farthest_point_sampling_from, nearest_index, nearest_indices, normalize_for_eval,
};
pub use sampling::{
    distance_weight, sample_shape, sample_surface_points, uniform_positions, SamplingConfig,
    SdfSample, ShapeSampling,
};
pub use shapes::{
    box_sdf, procedural_sdf, Aabb, FamilyRanges, PartKind, ProcShape, ProcShapeParams,
    ShapeFamily,
};

/// Half-width of the cubic sampling domain.
pub const DOMAIN_HALF_EXTENT: f64 = 1.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no sign change of the distance field found inside the sampling domain")]
    SurfaceNotFound,
    #[error("distance {dist} exceeds the sampling maximum {max_abs}")]
    Domain { dist: f64, max_abs: f64 },
    #[error("empty input point set")]
    EmptyInput,
    #[error("requested {k} points from a set of {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("level set {level} is not crossed anywhere on the grid")]
    EmptyLevelSet { level: f64 },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("all points coincide")]
    DegenerateInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A point in normalized world units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, o: Point3) -> f64 {
        (self - o).norm()
    }

    pub fn distance_sq(self, o: Point3) -> f64 {
        (self - o).norm_sq()
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn lerp(self, o: Point3, t: f64) -> Point3 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        *self = *self + o;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Arithmetic mean of a non-empty point set.
pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Point3::ORIGIN, |acc, &p| acc + p);
    Some(sum * (1.0 / points.len() as f64))
}
