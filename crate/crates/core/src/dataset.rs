//! Shape collections and the `HFDS` binary file format.
//!
//! Layout (little-endian): magic `HFDS`, then `version, shape_count,
//! n_uniform, n_surface, handle_count` as u32. Each shape stores its id
//! (u64), family tag (u8), an 8×f32 parameter block, the uniform and surface
//! samples as `x, y, z, d` f32 quadruples, and `handle_count × 3` f32 handle
//! coordinates (NaN until canonical handles are assigned).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{
    round_f32, sample_shape, uniform_positions, FamilyRanges, GeometryError, PartKind, Point3, ProcShape,
    ProcShapeParams, SamplingConfig, SdfSample, ShapeFamily, ShapeSampling,
};

pub const MAGIC: &[u8; 4] = b"HFDS";
pub const VERSION: u32 = 1;
/// Family tag for shapes that were not produced by a built-in generator.
pub const EXTERNAL_TAG: u8 = 255;
/// Parameter-block slot flagging injected outliers.
const OUTLIER_SLOT: usize = 7;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("unknown shape id {0}")]
    UnknownShape(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub shape_id: u64,
    /// `None` for externally supplied samples.
    pub family: Option<ShapeFamily>,
    pub params_block: [f32; 8],
    pub sampling: ShapeSampling,
    pub handles: Option<Vec<Point3>>,
}

impl ShapeRecord {
    pub fn params(&self) -> Option<ProcShapeParams> {
        self.family.map(|f| ProcShapeParams::from_block(f, &self.params_block))
    }

    /// The analytic shape, when the record came from a generator.
    pub fn proc_shape(&self) -> Option<ProcShape> {
        self.params().and_then(|p| ProcShape::new(p).ok())
    }

    pub fn is_outlier(&self) -> bool {
        self.params_block[OUTLIER_SLOT] > 0.5
    }

    /// A clean surface point cloud of `n` points. Generated shapes are sampled
    /// exactly on their exposed faces; external shapes fall back to the
    /// near-surface samples with the smallest |d|.
    pub fn surface_cloud(&self, n: usize, seed: u64) -> Vec<Point3> {
        self.labeled_surface_cloud(n, seed).into_iter().map(|(p, _)| p).collect()
    }

    pub fn labeled_surface_cloud(&self, n: usize, seed: u64) -> Vec<(Point3, Option<PartKind>)> {
        if let Some(shape) = self.proc_shape() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return shape
                .surface_points(n, &mut rng)
                .into_iter()
                .map(|(p, k)| (p, Some(k)))
                .collect();
        }
        let mut by_dist: Vec<&SdfSample> = self.sampling.surface.iter().collect();
        by_dist.sort_by(|a, b| a.dist.abs().total_cmp(&b.dist.abs()));
        by_dist.into_iter().take(n).map(|s| (s.pos, None)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_uniform: usize,
    pub n_surface: usize,
    pub handle_count: usize,
    pub shapes: Vec<ShapeRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub family: ShapeFamily,
    pub count: usize,
    pub n_uniform: usize,
    pub n_surface: usize,
    pub handle_count: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
    /// Ordinary shapes draw from the family ranges shrunk by this factor.
    pub central_fraction: f64,
    /// Extra shapes whose dimensions sit at the extremes of the full ranges.
    pub outliers: usize,
}

impl GenerateConfig {
    pub fn new(family: ShapeFamily, count: usize, seed: u64) -> Self {
        Self {
            family,
            count,
            n_uniform: 2048,
            n_surface: 2048,
            handle_count: 8,
            seed,
            sampling: SamplingConfig::default(),
            central_fraction: 1.0,
            outliers: 0,
        }
    }
}

/// Parameters at the corners of the full range box.
fn extreme_params<R: Rng + ?Sized>(family: ShapeFamily, rng: &mut R) -> ProcShapeParams {
    let r = family.ranges();
    let mut p = ProcShapeParams::random(family, &r, rng);
    let mut pick = |(lo, hi): (f64, f64)| round_f32(if rng.random_bool(0.5) { lo } else { hi });
    p.top_width = pick(r.top_width);
    p.top_depth = pick(r.top_depth);
    p.top_thickness = pick(r.top_thickness);
    if family == ShapeFamily::ProcTables {
        p.leg_height = pick(r.leg_height);
        p.leg_thickness = pick(r.leg_thickness);
    }
    p
}

fn rounded(samples: Vec<SdfSample>, sdf: &dyn Fn(Point3) -> f64) -> Vec<SdfSample> {
    samples
        .into_iter()
        .map(|s| {
            let pos = Point3::new(round_f32(s.pos.x), round_f32(s.pos.y), round_f32(s.pos.z));
            SdfSample::new(pos, round_f32(sdf(pos)))
        })
        .collect()
}

/// Samples one analytic shape. Values are rounded to f32 so a file round
/// trip is exact.
pub fn sample_record(
    shape_id: u64,
    params: ProcShapeParams,
    n_uniform: usize,
    n_surface: usize,
    shared: Option<&[Point3]>,
    seed: u64,
    cfg: &SamplingConfig,
) -> Result<ShapeRecord> {
    let shape = ProcShape::new(params)?;
    let sdf = |p: Point3| shape.sdf(p);
    let s = sample_shape(&sdf, n_uniform, n_surface, shared, seed, cfg)?;
    let sampling = ShapeSampling::new(shape_id, rounded(s.uniform, &sdf), rounded(s.surface, &sdf));
    Ok(ShapeRecord {
        shape_id,
        family: Some(params.family),
        params_block: params.to_block(),
        sampling,
        handles: None,
    })
}

/// Generates a collection whose uniform samples share one position set.
pub fn generate_dataset(cfg: &GenerateConfig) -> Result<Dataset> {
    if cfg.count == 0 || cfg.n_uniform == 0 || cfg.n_surface == 0 {
        return Err(DatasetError::Format("counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared: Vec<Point3> = uniform_positions(cfg.n_uniform, &mut rng)
        .into_iter()
        .map(|p| Point3::new(round_f32(p.x), round_f32(p.y), round_f32(p.z)))
        .collect();
    let ranges: FamilyRanges = cfg.family.ranges().central(cfg.central_fraction);
    let mut shapes = Vec::with_capacity(cfg.count + cfg.outliers);
    for i in 0..cfg.count + cfg.outliers {
        let outlier = i >= cfg.count;
        let params = if outlier {
            extreme_params(cfg.family, &mut rng)
        } else {
            ProcShapeParams::random(cfg.family, &ranges, &mut rng)
        };
        let seed = rng.random::<u64>();
        let mut rec = sample_record(i as u64, params, cfg.n_uniform, cfg.n_surface, Some(&shared), seed, &cfg.sampling)?;
        if outlier {
            rec.params_block[OUTLIER_SLOT] = 1.0;
        }
        shapes.push(rec);
    }
    Ok(Dataset { n_uniform: cfg.n_uniform, n_surface: cfg.n_surface, handle_count: cfg.handle_count, shapes })
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(DatasetError::Format("unexpected end of file".into()));
        }
        let (h, t) = self.buf.split_at(n);
        self.buf = t;
        Ok(h)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn samples(&mut self, n: usize) -> Result<Vec<SdfSample>> {
        (0..n)
            .map(|_| {
                let (x, y, z, d) = (self.f32()?, self.f32()?, self.f32()?, self.f32()?);
                Ok(SdfSample::new(Point3::new(x, y, z), d))
            })
            .collect()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.shapes.iter().map(|s| s.shape_id).collect()
    }

    pub fn get(&self, shape_id: u64) -> Result<&ShapeRecord> {
        self.shapes
            .iter()
            .find(|s| s.shape_id == shape_id)
            .ok_or(DatasetError::UnknownShape(shape_id))
    }

    pub fn index_of(&self, shape_id: u64) -> Result<usize> {
        self.shapes
            .iter()
            .position(|s| s.shape_id == shape_id)
            .ok_or(DatasetError::UnknownShape(shape_id))
    }

    /// Whether every shape carries handles of the right count.
    pub fn has_handles(&self) -> bool {
        self.shapes
            .iter()
            .all(|s| s.handles.as_ref().is_some_and(|h| h.len() == self.handle_count))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.shapes.len() as u32, self.n_uniform as u32, self.n_surface as u32, self.handle_count as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for s in &self.shapes {
            out.extend_from_slice(&s.shape_id.to_le_bytes());
            out.push(s.family.map_or(EXTERNAL_TAG, ShapeFamily::tag));
            for v in s.params_block {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for sample in s.sampling.uniform.iter().chain(&s.sampling.surface) {
                for v in [sample.pos.x, sample.pos.y, sample.pos.z, sample.dist] {
                    f(&mut out, v);
                }
            }
            for k in 0..self.handle_count {
                let p = s.handles.as_ref().and_then(|h| h.get(k).copied());
                let p = p.unwrap_or(Point3::new(f64::NAN, f64::NAN, f64::NAN));
                for v in p.to_array() {
                    f(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        if r.take(4)? != MAGIC {
            return Err(DatasetError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DatasetError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let n_uniform = r.u32()? as usize;
        let n_surface = r.u32()? as usize;
        let handle_count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let shape_id = r.u64()?;
            let tag = r.take(1)?[0];
            let family = match tag {
                EXTERNAL_TAG => None,
                t => Some(ShapeFamily::from_tag(t).ok_or_else(|| DatasetError::Format(format!("unknown family tag {t}")))?),
            };
            let mut params_block = [0f32; 8];
            for v in &mut params_block {
                *v = r.f32()? as f32;
            }
            let uniform = r.samples(n_uniform)?;
            let surface = r.samples(n_surface)?;
            let mut handles = Vec::with_capacity(handle_count);
            for _ in 0..handle_count {
                handles.push(Point3::new(r.f32()?, r.f32()?, r.f32()?));
            }
            let handles = if handle_count > 0 && handles.iter().all(|p| p.is_finite()) { Some(handles) } else { None };
            shapes.push(ShapeRecord {
                shape_id,
                family,
                params_block,
                sampling: ShapeSampling::new(shape_id, uniform, surface),
                handles,
            });
        }
        if !r.buf.is_empty() {
            return Err(DatasetError::Format("trailing bytes".into()));
        }
        Ok(Self { n_uniform, n_surface, handle_count, shapes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> Dataset {
        let cfg = GenerateConfig { n_uniform: 64, n_surface: 32, outliers: 1, ..GenerateConfig::new(ShapeFamily::ProcTables, 3, seed) };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut ds = small(7);
        ds.shapes[1].handles = Some(vec![Point3::new(0.5, -0.25, 1.0); 8]);
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
        assert!(back.shapes[0].handles.is_none());
        assert!(!back.has_handles());
    }

    #[test]
    fn generation_is_deterministic_and_shares_positions() {
        let (a, b) = (small(3), small(3));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), small(4).to_bytes());
        let first = a.shapes[0].sampling.uniform_positions();
        assert!(a.shapes.iter().all(|s| s.sampling.uniform_positions() == first));
        assert_eq!(a.shapes.iter().filter(|s| s.is_outlier()).count(), 1);
        for s in &a.shapes {
            let shape = s.proc_shape().unwrap();
            for x in &s.sampling.surface {
                assert_eq!(x.dist, round_f32(shape.sdf(x.pos)));
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = small(1).to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
    }

    #[test]
    fn surface_clouds() {
        let ds = small(2);
        let rec = &ds.shapes[0];
        let cloud = rec.surface_cloud(100, 9);
        let shape = rec.proc_shape().unwrap();
        assert!(cloud.iter().all(|p| shape.sdf(*p).abs() < 1e-9));
        let mut external = rec.clone();
        external.family = None;
        let fallback = external.surface_cloud(10, 0);
        assert_eq!(fallback.len(), 10);
        let worst = fallback.iter().map(|p| shape.sdf(*p).abs()).fold(0.0, f64::max);
        let median = {
            let mut d: Vec<f64> = rec.sampling.surface.iter().map(|s| s.dist.abs()).collect();
            d.sort_by(f64::total_cmp);
            d[d.len() / 2]
        };
        assert!(worst <= median + 1e-6);
    }
}
