use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Point3, Result};

/// Axis-aligned box given by center and half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Point3,
    pub half: Point3,
}

impl Aabb {
    pub fn new(center: Point3, half: Point3) -> Self {
        Self { center, half }
    }

    pub fn min(&self) -> Point3 {
        self.center - self.half
    }

    pub fn max(&self) -> Point3 {
        self.center + self.half
    }

    pub fn sdf(&self, p: Point3) -> f64 {
        box_sdf(p, self.center, self.half)
    }
}

/// Exact signed distance to an axis-aligned box.
pub fn box_sdf(p: Point3, center: Point3, half: Point3) -> f64 {
    let qx = (p.x - center.x).abs() - half.x;
    let qy = (p.y - center.y).abs() - half.y;
    let qz = (p.z - center.z).abs() - half.z;
    let outside = Point3::new(qx.max(0.0), qy.max(0.0), qz.max(0.0)).norm();
    let inside = qx.max(qy).max(qz).min(0.0);
    outside + inside
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    ProcTables,
    ProcBoxes,
}

impl ShapeFamily {
    pub fn tag(self) -> u8 {
        match self {
            ShapeFamily::ProcTables => 0,
            ShapeFamily::ProcBoxes => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ShapeFamily::ProcTables),
            1 => Some(ShapeFamily::ProcBoxes),
            _ => None,
        }
    }

    pub fn ranges(self) -> FamilyRanges {
        match self {
            ShapeFamily::ProcTables => FamilyRanges::TABLES,
            ShapeFamily::ProcBoxes => FamilyRanges::BOXES,
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proc_tables" => Ok(ShapeFamily::ProcTables),
            "proc_boxes" => Ok(ShapeFamily::ProcBoxes),
            other => Err(GeometryError::InvalidArgument(format!("unknown family {other}"))),
        }
    }
}

/// Inclusive parameter ranges for a procedural family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyRanges {
    pub top_width: (f64, f64),
    pub top_depth: (f64, f64),
    pub top_thickness: (f64, f64),
    pub leg_height: (f64, f64),
    pub leg_thickness: (f64, f64),
    pub crossbar_height_frac: (f64, f64),
}

impl FamilyRanges {
    pub const TABLES: FamilyRanges = FamilyRanges {
        top_width: (0.6, 1.8),
        top_depth: (0.6, 1.8),
        top_thickness: (0.05, 0.15),
        leg_height: (0.4, 1.0),
        leg_thickness: (0.04, 0.12),
        crossbar_height_frac: (0.2, 0.5),
    };

    /// Boxes reuse the top extents as the box size; leg fields are unused.
    pub const BOXES: FamilyRanges = FamilyRanges {
        top_width: (0.4, 1.8),
        top_depth: (0.4, 1.8),
        top_thickness: (0.4, 1.8),
        leg_height: (0.0, 0.0),
        leg_thickness: (0.0, 0.0),
        crossbar_height_frac: (0.0, 0.0),
    };

    /// The same ranges shrunk towards their midpoints by `fraction` (0 = point, 1 = full).
    pub fn central(&self, fraction: f64) -> FamilyRanges {
        let shrink = |(lo, hi): (f64, f64)| {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * fraction;
            (mid - half, mid + half)
        };
        FamilyRanges {
            top_width: shrink(self.top_width),
            top_depth: shrink(self.top_depth),
            top_thickness: shrink(self.top_thickness),
            leg_height: shrink(self.leg_height),
            leg_thickness: shrink(self.leg_thickness),
            crossbar_height_frac: shrink(self.crossbar_height_frac),
        }
    }
}

/// Generator parameters of one procedural shape, in raw (un-normalized) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcShapeParams {
    pub family: ShapeFamily,
    pub top_width: f64,
    pub top_depth: f64,
    pub top_thickness: f64,
    pub leg_height: f64,
    pub leg_thickness: f64,
    pub has_crossbar: bool,
    pub crossbar_height_frac: f64,
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    // Parameters travel through f32 in the dataset file.
    let tol = 1e-6 * (1.0 + hi.abs());
    v.is_finite() && v >= lo - tol && v <= hi + tol
}

impl ProcShapeParams {
    pub fn unit_cube() -> Self {
        Self::cuboid(1.0, 1.0, 1.0)
    }

    pub fn cuboid(width: f64, depth: f64, height: f64) -> Self {
        Self {
            family: ShapeFamily::ProcBoxes,
            top_width: width,
            top_depth: depth,
            top_thickness: height,
            leg_height: 0.0,
            leg_thickness: 0.0,
            has_crossbar: false,
            crossbar_height_frac: 0.0,
        }
    }

    pub fn table(width: f64, depth: f64, thickness: f64, leg_height: f64, leg_thickness: f64) -> Self {
        Self {
            family: ShapeFamily::ProcTables,
            top_width: width,
            top_depth: depth,
            top_thickness: thickness,
            leg_height,
            leg_thickness,
            has_crossbar: false,
            crossbar_height_frac: 0.35,
        }
    }

    pub fn with_crossbar(mut self, height_frac: f64) -> Self {
        self.has_crossbar = true;
        self.crossbar_height_frac = height_frac;
        self
    }

    /// Draws parameters uniformly from `ranges`; crossbars appear with probability 1/2.
    pub fn random<R: Rng + ?Sized>(family: ShapeFamily, ranges: &FamilyRanges, rng: &mut R) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| {
            if hi > lo {
                round_f32(rng.random_range(lo..=hi))
            } else {
                lo
            }
        };
        let top_width = draw(ranges.top_width);
        let top_depth = draw(ranges.top_depth);
        let top_thickness = draw(ranges.top_thickness);
        let leg_height = draw(ranges.leg_height);
        let leg_thickness = draw(ranges.leg_thickness);
        let crossbar_height_frac = draw(ranges.crossbar_height_frac);
        let has_crossbar = family == ShapeFamily::ProcTables && rng.random_bool(0.5);
        Self {
            family,
            top_width,
            top_depth,
            top_thickness,
            leg_height,
            leg_thickness,
            has_crossbar,
            crossbar_height_frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.family {
            ShapeFamily::ProcTables => {
                let r = FamilyRanges::TABLES;
                in_range(self.top_width, r.top_width)
                    && in_range(self.top_depth, r.top_depth)
                    && in_range(self.top_thickness, r.top_thickness)
                    && in_range(self.leg_height, r.leg_height)
                    && in_range(self.leg_thickness, r.leg_thickness)
                    && (!self.has_crossbar || in_range(self.crossbar_height_frac, r.crossbar_height_frac))
            }
            // Boxes are smoke-test shapes; any positive finite size is accepted.
            ShapeFamily::ProcBoxes => [self.top_width, self.top_depth, self.top_thickness]
                .iter()
                .all(|v| v.is_finite() && *v > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidArgument(format!("parameters out of family range: {self:?}")))
        }
    }

    /// The eight-float parameter block stored in dataset files.
    pub fn to_block(&self) -> [f32; 8] {
        [
            self.top_width as f32,
            self.top_depth as f32,
            self.top_thickness as f32,
            self.leg_height as f32,
            self.leg_thickness as f32,
            if self.has_crossbar { 1.0 } else { 0.0 },
            self.crossbar_height_frac as f32,
            0.0,
        ]
    }

    pub fn from_block(family: ShapeFamily, b: &[f32; 8]) -> Self {
        Self {
            family,
            top_width: b[0] as f64,
            top_depth: b[1] as f64,
            top_thickness: b[2] as f64,
            leg_height: b[3] as f64,
            leg_thickness: b[4] as f64,
            has_crossbar: b[5] > 0.5,
            crossbar_height_frac: b[6] as f64,
        }
    }

    /// Raw boxes making up the shape, before normalization.
    pub fn raw_parts(&self) -> Vec<(PartKind, Aabb)> {
        match self.family {
            ShapeFamily::ProcBoxes => vec![(
                PartKind::Body,
                Aabb::new(
                    Point3::ORIGIN,
                    Point3::new(self.top_width, self.top_depth, self.top_thickness) * 0.5,
                ),
            )],
            ShapeFamily::ProcTables => {
                let (w, d, t) = (self.top_width, self.top_depth, self.top_thickness);
                let (l, s) = (self.leg_height, self.leg_thickness);
                let mut parts = vec![(
                    PartKind::Top,
                    Aabb::new(Point3::new(0.0, 0.0, l + 0.5 * t), Point3::new(0.5 * w, 0.5 * d, 0.5 * t)),
                )];
                let lx = 0.5 * w - 0.5 * s;
                let ly = 0.5 * d - 0.5 * s;
                let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
                for (i, (sx, sy)) in corners.iter().enumerate() {
                    parts.push((
                        PartKind::Leg(i as u8),
                        Aabb::new(Point3::new(sx * lx, sy * ly, 0.5 * l), Point3::new(0.5 * s, 0.5 * s, 0.5 * l)),
                    ));
                }
                if self.has_crossbar {
                    let z = self.crossbar_height_frac * l;
                    for (i, sy) in [1.0, -1.0].iter().enumerate() {
                        parts.push((
                            PartKind::Crossbar(i as u8),
                            Aabb::new(Point3::new(0.0, sy * ly, z), Point3::new(lx, 0.5 * s, 0.5 * s)),
                        ));
                    }
                }
                parts
            }
        }
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Signed distance of `p` to the raw union-of-boxes shape.
///
/// Exact outside; inside it is the largest box-interior distance, which
/// bounds the true distance from below in magnitude.
pub fn procedural_sdf(params: &ProcShapeParams, p: Point3) -> f64 {
    params
        .raw_parts()
        .iter()
        .map(|(_, b)| b.sdf(p))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartKind {
    Top,
    Leg(u8),
    Crossbar(u8),
    Body,
}

impl PartKind {
    /// Coarse two-way labelling: table top (0) versus everything supporting it (1).
    pub fn coarse_label(self) -> usize {
        match self {
            PartKind::Top | PartKind::Body => 0,
            PartKind::Leg(_) | PartKind::Crossbar(_) => 1,
        }
    }
}

/// A procedural shape placed in the normalized world frame: centered in x/y,
/// resting on `z = -1`, largest bounding-box edge equal to 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcShape {
    pub params: ProcShapeParams,
    pub parts: Vec<(PartKind, Aabb)>,
    /// Raw-to-world scale factor.
    pub scale: f64,
}

impl ProcShape {
    pub fn new(params: ProcShapeParams) -> Result<Self> {
        params.validate()?;
        let raw = params.raw_parts();
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for (_, b) in &raw {
            let (a, c) = (b.min(), b.max());
            lo = Point3::new(lo.x.min(a.x), lo.y.min(a.y), lo.z.min(a.z));
            hi = Point3::new(hi.x.max(c.x), hi.y.max(c.y), hi.z.max(c.z));
        }
        let extent = hi - lo;
        let largest = extent.x.max(extent.y).max(extent.z);
        let scale = 2.0 / largest;
        let anchor = Point3::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y), lo.z);
        let ground = Point3::new(0.0, 0.0, -1.0);
        let parts = raw
            .into_iter()
            .map(|(k, b)| (k, Aabb::new((b.center - anchor) * scale + ground, b.half * scale)))
            .collect();
        Ok(Self { params, parts, scale })
    }

    pub fn sdf(&self, p: Point3) -> f64 {
        self.parts.iter().map(|(_, b)| b.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// The part whose box is closest to `p` (ties resolved by part order).
    pub fn part_at(&self, p: Point3) -> PartKind {
        let mut best = (f64::INFINITY, self.parts[0].0);
        for (k, b) in &self.parts {
            let d = b.sdf(p);
            if d < best.0 {
                best = (d, *k);
            }
        }
        best.1
    }

    /// Bottom center of leg `leg` (0 is the `+x, +y` leg, then counter-clockwise).
    pub fn leg_foot(&self, leg: u8) -> Option<Point3> {
        self.parts.iter().find_map(|(k, b)| match k {
            PartKind::Leg(i) if *i == leg => Some(Point3::new(b.center.x, b.center.y, b.min().z)),
            _ => None,
        })
    }

    pub fn top_height(&self) -> f64 {
        self.parts.iter().map(|(_, b)| b.max().z).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `n` points uniform over the exposed surface of the union, each tagged
    /// with the part it lies on. Face points inside or touching another part
    /// are rejected, so contact regions between parts are never sampled.
    pub fn surface_points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Point3, PartKind)> {
        // (part index, axis, side, area)
        let mut faces = Vec::new();
        for (i, (_, b)) in self.parts.iter().enumerate() {
            let h = b.half;
            let areas = [4.0 * h.y * h.z, 4.0 * h.x * h.z, 4.0 * h.x * h.y];
            for (axis, &area) in areas.iter().enumerate() {
                for side in [-1.0, 1.0] {
                    faces.push((i, axis, side, area));
                }
            }
        }
        let total: f64 = faces.iter().map(|f| f.3).sum();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut r = rng.random_range(0.0..total);
            let mut face = faces[faces.len() - 1];
            for f in &faces {
                if r < f.3 {
                    face = *f;
                    break;
                }
                r -= f.3;
            }
            let (i, axis, side, _) = face;
            let (kind, b) = self.parts[i];
            let mut c = [0.0; 3];
            for (a, ca) in c.iter_mut().enumerate() {
                let half = b.half.component(a);
                *ca = if a == axis { side * half } else { rng.random_range(-half..half) };
            }
            let p = b.center + Point3::from_array(c);
            let covered = self
                .parts
                .iter()
                .enumerate()
                .any(|(j, (_, other))| j != i && other.sdf(p) <= 1e-9);
            if !covered {
                out.push((p, kind));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cube_distances() {
        let cube = ProcShapeParams::unit_cube();
        assert_eq!(procedural_sdf(&cube, Point3::ORIGIN), -0.5);
        assert_eq!(procedural_sdf(&cube, Point3::new(1.5, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn table_far_above_top_matches_surface_brute_force() {
        let table = ProcShapeParams::table(1.0, 1.0, 0.1, 0.6, 0.08);
        let p = Point3::new(0.1, -0.05, 3.0);
        let sdf = procedural_sdf(&table, p);
        // Plane distance: top surface sits at z = 0.7.
        assert!((sdf - (3.0 - 0.7)).abs() < 1e-12);

        // Dense grid of points on all box faces; nearest one approximates the distance.
        let mut best = f64::INFINITY;
        let n = 120;
        for (_, b) in table.raw_parts() {
            let (lo, hi) = (b.min(), b.max());
            for axis in 0..3 {
                for side in [lo, hi] {
                    for i in 0..=n {
                        for j in 0..=n {
                            let u = i as f64 / n as f64;
                            let v = j as f64 / n as f64;
                            let mut q = [0.0; 3];
                            let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                            q[axis] = side.component(axis);
                            q[a1] = lo.component(a1) + u * (hi.component(a1) - lo.component(a1));
                            q[a2] = lo.component(a2) + v * (hi.component(a2) - lo.component(a2));
                            best = best.min(p.distance(Point3::from_array(q)));
                        }
                    }
                }
            }
        }
        assert!((best - sdf).abs() < 1e-3, "brute force {best} vs sdf {sdf}");
    }

    #[test]
    fn normalization_fits_frame() {
        let table = ProcShapeParams::table(1.8, 0.7, 0.1, 0.5, 0.06).with_crossbar(0.3);
        let shape = ProcShape::new(table).unwrap();
        let mut lo = Point3::new(9.0, 9.0, 9.0);
        let mut hi = -lo;
        for (_, b) in &shape.parts {
            lo = Point3::new(lo.x.min(b.min().x), lo.y.min(b.min().y), lo.z.min(b.min().z));
            hi = Point3::new(hi.x.max(b.max().x), hi.y.max(b.max().y), hi.z.max(b.max().z));
        }
        let e = hi - lo;
        assert!((e.x.max(e.y).max(e.z) - 2.0).abs() < 1e-12);
        assert!((lo.z + 1.0).abs() < 1e-12);
        assert!((lo.x + hi.x).abs() < 1e-12 && (lo.y + hi.y).abs() < 1e-12);
        // World SDF is the raw SDF rescaled.
        let p = Point3::new(0.3, 0.2, 0.9);
        let raw_p = Point3::new(p.x / shape.scale, p.y / shape.scale, (p.z + 1.0) / shape.scale);
        let expect = shape.scale * procedural_sdf(&table, raw_p);
        assert!((shape.sdf(p) - expect).abs() < 1e-12);
    }

    #[test]
    fn parameters_outside_ranges_are_rejected() {
        let bad = ProcShapeParams::table(2.5, 1.0, 0.1, 0.6, 0.08);
        assert!(ProcShape::new(bad).is_err());
    }

    #[test]
    fn part_lookup_and_labels() {
        let shape = ProcShape::new(ProcShapeParams::table(1.0, 1.0, 0.1, 0.6, 0.08)).unwrap();
        assert_eq!(shape.part_at(Point3::new(0.0, 0.0, shape.top_height())), PartKind::Top);
        let foot = shape.leg_foot(0).unwrap();
        assert_eq!(shape.part_at(foot).coarse_label(), 1);
        assert!(foot.x > 0.0 && foot.y > 0.0 && (foot.z + 1.0).abs() < 1e-12);
    }

    #[test]
    fn surface_points_lie_on_exposed_faces() {
        use rand::SeedableRng;
        let params = ProcShapeParams::table(1.2, 0.9, 0.1, 0.7, 0.1).with_crossbar(0.3);
        let shape = ProcShape::new(params).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pts = shape.surface_points(3000, &mut rng);
        assert_eq!(pts.len(), 3000);
        for (p, kind) in &pts {
            assert!(shape.sdf(*p).abs() < 1e-9);
            assert_eq!(shape.part_at(*p), *kind);
        }
        // Leg tops are hidden under the table top.
        let leg_top = shape.parts[1].1.max().z;
        assert!(!pts.iter().any(|(p, k)| matches!(k, PartKind::Leg(_)) && (p.z - leg_top).abs() < 1e-12));
        assert!(pts.iter().any(|(_, k)| matches!(k, PartKind::Crossbar(_))));
    }
}
