//! Handle editing by iterative manifold projection, style transfer and the
//! latent-manifold experiments (reprojection and uniqueness).
//!
//! One projection decodes a latent at fresh uniform positions and encodes the
//! resulting samples again. Handle edits push the edited handles a capped step
//! toward their targets and then project, for a bounded number of rounds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::train::stream_seed;
use crate::autoencoder::{LatentCode, Model};
use crate::dataset::Dataset;
use crate::geometry::{marching_cubes_grid, GeometryError, uniform_positions, Point3, ScalarGrid, TriangleMesh};
use crate::{Error, Result};

const STAGE_REENCODE: u64 = 0x10;
const STAGE_REPROJECT: u64 = 0x11;
const STAGE_UNIQUE: u64 = 0x12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub max_step: f64,
    pub max_rounds: usize,
    pub early_stop_progress: f64,
    pub reencode_sample_count: usize,
    pub mesh_resolution: usize,
    pub mesh_level: f64,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_step: 0.075,
            max_rounds: 10,
            early_stop_progress: 0.03,
            reencode_sample_count: 2048,
            mesh_resolution: 64,
            mesh_level: 0.0,
            seed: 0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step > self.early_stop_progress && self.early_stop_progress > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need max_step > early_stop_progress > 0, got {} and {}",
                self.max_step, self.early_stop_progress
            )));
        }
        if self.max_rounds == 0 || self.reencode_sample_count == 0 {
            return Err(Error::InvalidArgument("max_rounds and reencode_sample_count must be positive".into()));
        }
        if self.mesh_resolution < 8 {
            return Err(Error::InvalidArgument(format!("mesh resolution {} below 8", self.mesh_resolution)));
        }
        Ok(())
    }
}

/// Target positions for a subset of handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub edits: Vec<(usize, Point3)>,
}

impl EditRequest {
    pub fn new(edits: Vec<(usize, Point3)>) -> Self {
        Self { edits }
    }

    pub fn validate(&self, handle_count: usize) -> Result<()> {
        if self.edits.is_empty() {
            return Err(Error::NoEdits);
        }
        let mut seen = vec![false; handle_count];
        for &(i, t) in &self.edits {
            if i >= handle_count {
                return Err(Error::InvalidArgument(format!("handle {i} out of range for {handle_count} handles")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("handle {i} edited twice")));
            }
            if !t.is_finite() {
                return Err(Error::InvalidArgument(format!("target for handle {i} is not finite")));
            }
        }
        Ok(())
    }
}

/// Latent after one round. Round 0 is the state before the edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    pub latent: LatentCode,
    /// Distance gained toward the target per edited handle, in request order.
    pub progress: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub id: String,
    pub shape_id: Option<u64>,
    pub original: LatentCode,
    pub current: LatentCode,
    /// Style held fixed during handle edits.
    pub style: Vec<f64>,
    /// Rounds of the most recent edit.
    pub history: Vec<RoundSnapshot>,
    pub edits_applied: u64,
}

impl EditSession {
    pub fn new(id: impl Into<String>, shape_id: Option<u64>, code: LatentCode) -> Self {
        Self {
            id: id.into(),
            shape_id,
            style: code.style.clone(),
            original: code.clone(),
            current: code,
            history: Vec::new(),
            edits_applied: 0,
        }
    }

    /// Replaces the fixed style, e.g. after a style transfer.
    pub fn set_style(&mut self, style: Vec<f64>) {
        self.current.style = style.clone();
        self.style = style;
    }

    pub fn reset(&mut self) {
        self.current = self.original.clone();
        self.style = self.original.style.clone();
        self.history.clear();
    }
}

/// Sessions keyed by id with sequential, deterministic ids.
#[derive(Debug, Default)]
pub struct SessionRegistry {
    next: u64,
    sessions: BTreeMap<String, EditSession>,
}

impl SessionRegistry {
    pub fn open(&mut self, shape_id: Option<u64>, code: LatentCode) -> String {
        let id = format!("s{}", self.next);
        self.next += 1;
        self.sessions.insert(id.clone(), EditSession::new(id.clone(), shape_id, code));
        id
    }

    pub fn get(&self, id: &str) -> Result<&EditSession> {
        self.sessions.get(id).ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut EditSession> {
        self.sessions.get_mut(id).ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }

    pub fn close(&mut self, id: &str) -> Result<EditSession> {
        self.sessions.remove(id).ok_or_else(|| Error::SessionNotFound(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

/// Decode at `sample_count` fresh uniform positions and encode the result.
pub fn reencode(latent: &LatentCode, model: &Model, sample_count: usize, seed: u64) -> Result<LatentCode> {
    let positions = uniform_positions(sample_count, &mut ChaCha8Rng::seed_from_u64(seed));
    model.reencode(&latent.handles, &latent.style, &positions)
}

/// Zero level set (or `level`) of the decoded field on a `resolution^3` grid.
pub fn extract_mesh(model: &Model, code: &LatentCode, resolution: usize, level: f64) -> Result<TriangleMesh> {
    let positions = ScalarGrid::positions(resolution);
    let values = model.decode_code(code, &positions)?;
    Ok(marching_cubes_grid(&ScalarGrid::from_values(resolution, values)?, level)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub latent: LatentCode,
    pub mesh: TriangleMesh,
    /// Rounds run, excluding the initial snapshot.
    pub rounds: usize,
    pub stopped_early: bool,
}

/// Iterative edit loop. With `on_round` the caller sees each snapshot as it is
/// produced (the service streams them).
pub fn edit_handles(model: &Model, session: &mut EditSession, request: &EditRequest, cfg: &ProjectionConfig) -> Result<EditOutcome> {
    edit_handles_with(model, session, request, cfg, |_| ())
}

pub fn edit_handles_with<F: FnMut(&RoundSnapshot)>(
    model: &Model,
    session: &mut EditSession,
    request: &EditRequest,
    cfg: &ProjectionConfig,
    mut on_round: F,
) -> Result<EditOutcome> {
    cfg.validate()?;
    request.validate(model.config.handle_count)?;
    let edit_index = session.edits_applied;
    session.edits_applied += 1;
    session.current.style = session.style.clone();
    session.history = vec![RoundSnapshot { round: 0, latent: session.current.clone(), progress: Vec::new() }];
    on_round(&session.history[0]);

    let mut stopped_early = false;
    let mut rounds = 0;
    for round in 1..=cfg.max_rounds {
        rounds = round;
        let before: Vec<f64> = request.edits.iter().map(|&(i, t)| session.current.handles[i].distance(t)).collect();
        let proposal = propose_step(&session.current, request, cfg.max_step);
        if proposal == session.current.handles {
            // Every edited handle is already at its target.
            let snap = RoundSnapshot { round, latent: session.current.clone(), progress: vec![0.0; request.edits.len()] };
            on_round(&snap);
            session.history.push(snap);
            stopped_early = true;
            break;
        }
        let seed = stream_seed(cfg.seed, STAGE_REENCODE, edit_index as usize, round);
        let mut projected = reencode(
            &LatentCode { handles: proposal, style: session.style.clone(), residual: session.current.residual.clone() },
            model,
            cfg.reencode_sample_count,
            seed,
        )?;
        projected.style = session.style.clone();
        let progress: Vec<f64> = request
            .edits
            .iter()
            .zip(&before)
            .map(|(&(i, t), b)| b - projected.handles[i].distance(t))
            .collect();
        session.current = projected;
        let snap = RoundSnapshot { round, latent: session.current.clone(), progress };
        on_round(&snap);
        let done = snap.progress.iter().all(|&p| p < cfg.early_stop_progress);
        session.history.push(snap);
        if done {
            stopped_early = true;
            break;
        }
    }
    // A latent far off the manifold may decode to nothing; that is a valid edit result.
    let mesh = match extract_mesh(model, &session.current, cfg.mesh_resolution, cfg.mesh_level) {
        Err(Error::Geometry(GeometryError::EmptyLevelSet { .. })) => TriangleMesh::default(),
        m => m?,
    };
    Ok(EditOutcome { latent: session.current.clone(), mesh, rounds, stopped_early })
}

/// Handles after moving each edited one by at most `max_step` toward its target.
pub fn propose_step(code: &LatentCode, request: &EditRequest, max_step: f64) -> Vec<Point3> {
    let mut out = code.handles.clone();
    for &(i, t) in &request.edits {
        let d = t - out[i];
        let dist = d.norm();
        if dist > 0.0 {
            out[i] = if dist <= max_step { t } else { out[i] + d * (max_step / dist) };
        }
    }
    out
}

/// `(handles_a + style_b, handles_b + style_a)`.
pub fn style_transfer(a: &LatentCode, b: &LatentCode) -> (LatentCode, LatentCode) {
    let ab = LatentCode { handles: a.handles.clone(), style: b.style.clone(), residual: a.residual.clone() };
    let ba = LatentCode { handles: b.handles.clone(), style: a.style.clone(), residual: b.residual.clone() };
    (ab, ba)
}

/// Mean Euclidean handle displacement after one projection.
pub fn handle_drift(model: &Model, code: &LatentCode, sample_count: usize, seed: u64) -> Result<f64> {
    let r = reencode(code, model, sample_count, seed)?;
    let total: f64 = code.handles.iter().zip(&r.handles).map(|(a, b)| a.distance(*b)).sum();
    Ok(total / code.handles.len().max(1) as f64)
}

/// Encodes every shape from its stored uniform samples.
pub fn encode_dataset(model: &Model, ds: &Dataset) -> Result<Vec<(u64, LatentCode)>> {
    ds.shapes.iter().map(|r| Ok((r.shape_id, model.encode(&r.sampling.uniform)?))).collect()
}

fn jitter(rng: &mut ChaCha8Rng, a: f64) -> Point3 {
    Point3::new(rng.random_range(-a..=a), rng.random_range(-a..=a), rng.random_range(-a..=a))
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionStats {
    pub mean_fraction: f64,
    pub median_fraction: f64,
    /// Share of counted trials whose remaining fraction is below 1.
    pub below_one: f64,
    pub trials: usize,
    pub skipped: usize,
}

/// Adds uniform noise in `[-noise, noise]` to every handle and style dimension
/// of a random code, projects once and reports the L1 fraction of the noise
/// that remains.
pub fn reprojection_experiment(
    model: &Model,
    codes: &[LatentCode],
    trials: usize,
    noise: f64,
    sample_count: usize,
    seed: u64,
) -> Result<ReprojectionStats> {
    if codes.is_empty() {
        return Err(Error::InvalidArgument("no latent codes to perturb".into()));
    }
    let mut fractions = Vec::with_capacity(trials);
    let mut skipped = 0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_REPROJECT, t, 0));
        let original = &codes[rng.random_range(0..codes.len())];
        let mut noised = original.clone();
        if noise > 0.0 {
            for p in &mut noised.handles {
                *p += jitter(&mut rng, noise);
            }
            for s in &mut noised.style {
                *s += rng.random_range(-noise..=noise);
            }
        }
        let applied = l1(&noised.decoder_latent(), &original.decoder_latent());
        if applied == 0.0 {
            skipped += 1;
            continue;
        }
        let r = reencode(&noised, model, sample_count, rng.random())?;
        fractions.push(l1(&r.decoder_latent(), &original.decoder_latent()) / applied);
    }
    let n = fractions.len();
    let mean = if n == 0 { f64::NAN } else { fractions.iter().sum::<f64>() / n as f64 };
    let below_one = if n == 0 { f64::NAN } else { fractions.iter().filter(|&&f| f < 1.0).count() as f64 / n as f64 };
    Ok(ReprojectionStats { mean_fraction: mean, median_fraction: median(&mut fractions), below_one, trials: n, skipped })
}

/// Distance from each code's handle constellation to the nearest other one.
pub fn uniqueness_scores(codes: &[LatentCode]) -> Vec<f64> {
    let flat: Vec<Vec<f64>> = codes.iter().map(LatentCode::flat_handles).collect();
    (0..flat.len())
        .map(|i| {
            (0..flat.len())
                .filter(|&j| j != i)
                .map(|j| flat[i].iter().zip(&flat[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
                .unwrap_or(0.0)
        })
        .collect()
}

/// Mean percentage of a random handle shift undone by one projection.
pub fn edit_loss_percent(model: &Model, code: &LatentCode, shifts: usize, shift: f64, sample_count: usize, seed: u64) -> Result<f64> {
    let original = code.flat_handles();
    let mut total = 0.0;
    let mut counted = 0;
    for k in 0..shifts {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STAGE_UNIQUE, k, 0));
        let mut shifted = code.clone();
        for p in &mut shifted.handles {
            *p += jitter(&mut rng, shift);
        }
        let applied = l1(&shifted.flat_handles(), &original);
        if applied == 0.0 {
            continue;
        }
        let r = reencode(&shifted, model, sample_count, rng.random())?;
        total += 100.0 * (1.0 - l1(&r.flat_handles(), &original) / applied);
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessStats {
    pub unique_loss_pct: f64,
    pub common_loss_pct: f64,
    pub unique_indices: Vec<usize>,
    pub common_indices: Vec<usize>,
}

/// Edit loss of the `n_extreme` most unique codes against the `n_extreme` most common.
pub fn uniqueness_experiment(
    model: &Model,
    codes: &[LatentCode],
    n_extreme: usize,
    shifts_per_item: usize,
    sample_count: usize,
    seed: u64,
) -> Result<UniquenessStats> {
    if codes.is_empty() || n_extreme == 0 {
        return Err(Error::InvalidArgument("uniqueness needs codes and n_extreme > 0".into()));
    }
    let scores = uniqueness_scores(codes);
    let mut order: Vec<usize> = (0..codes.len()).collect();
    // Stable: ties keep index order in both rankings.
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = n_extreme.min(codes.len());
    let common: Vec<usize> = order[..n].to_vec();
    let mut by_unique = order.clone();
    by_unique.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let unique: Vec<usize> = by_unique[..n].to_vec();
    let mean_loss = |set: &[usize]| -> Result<f64> {
        let mut s = 0.0;
        for &i in set {
            s += edit_loss_percent(model, &codes[i], shifts_per_item, 0.1, sample_count, seed ^ i as u64)?;
        }
        Ok(s / set.len() as f64)
    };
    Ok(UniquenessStats {
        unique_loss_pct: mean_loss(&unique)?,
        common_loss_pct: mean_loss(&common)?,
        unique_indices: unique,
        common_indices: common,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig::tiny(2), 3).unwrap()
    }

    fn code(m: &Model) -> LatentCode {
        LatentCode {
            handles: vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.3, -0.2, 0.1)],
            style: vec![0.1; m.config.style_dim],
            residual: vec![0.0; m.config.residual_dim],
        }
    }

    fn small_cfg() -> ProjectionConfig {
        ProjectionConfig { reencode_sample_count: 64, mesh_resolution: 8, ..ProjectionConfig::default() }
    }

    #[test]
    fn first_proposal_is_capped() {
        let m = model();
        let req = EditRequest::new(vec![(0, Point3::new(0.2, 0.0, 0.0))]);
        let p = propose_step(&code(&m), &req, 0.075);
        assert!((p[0].x - 0.075).abs() < 1e-15 && p[0].y == 0.0 && p[0].z == 0.0);
        assert_eq!(p[1], code(&m).handles[1]);
        let near = EditRequest::new(vec![(0, Point3::new(0.01, 0.0, 0.0))]);
        assert_eq!(propose_step(&code(&m), &near, 0.075)[0], Point3::new(0.01, 0.0, 0.0));
    }

    #[test]
    fn target_at_current_position_stops_after_one_round() {
        let m = model();
        let mut s = EditSession::new("a", None, code(&m));
        let req = EditRequest::new(vec![(1, Point3::new(0.3, -0.2, 0.1))]);
        let out = edit_handles(&m, &mut s, &req, &small_cfg()).unwrap();
        assert_eq!(out.rounds, 1);
        assert!(out.stopped_early);
        assert_eq!(out.latent, code(&m));
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn loop_respects_caps_and_fixes_style() {
        let m = model();
        let start = code(&m);
        let mut s = EditSession::new("a", None, start.clone());
        let cfg = ProjectionConfig { early_stop_progress: 1e-9, ..small_cfg() };
        let req = EditRequest::new(vec![(0, Point3::new(0.9, 0.9, 0.9))]);
        let out = edit_handles(&m, &mut s, &req, &cfg).unwrap();
        assert!(out.rounds <= cfg.max_rounds);
        assert!(s.history.len() <= cfg.max_rounds + 1);
        for w in s.history.windows(2) {
            let step = propose_step(&w[0].latent, &req, cfg.max_step)[0].distance(w[0].latent.handles[0]);
            assert!(step <= cfg.max_step + 1e-12);
            assert_eq!(w[1].latent.style, start.style);
        }
        let last = s.history.last().unwrap();
        let all_small = last.progress.iter().all(|&p| p < cfg.early_stop_progress);
        assert_eq!(out.stopped_early, all_small);
    }

    #[test]
    fn edits_are_deterministic() {
        let m = model();
        let req = EditRequest::new(vec![(0, Point3::new(0.5, 0.0, 0.0))]);
        let run = || {
            let mut s = EditSession::new("a", None, code(&m));
            edit_handles(&m, &mut s, &req, &small_cfg()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn request_validation() {
        let m = model();
        let mut s = EditSession::new("a", None, code(&m));
        let cfg = small_cfg();
        assert!(matches!(edit_handles(&m, &mut s, &EditRequest::new(vec![]), &cfg), Err(Error::NoEdits)));
        let dup = EditRequest::new(vec![(0, Point3::default()), (0, Point3::default())]);
        assert!(edit_handles(&m, &mut s, &dup, &cfg).is_err());
        let out_of_range = EditRequest::new(vec![(2, Point3::default())]);
        assert!(edit_handles(&m, &mut s, &out_of_range, &cfg).is_err());
        let bad = ProjectionConfig { early_stop_progress: 0.1, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn registry_reports_missing_sessions() {
        let m = model();
        let mut reg = SessionRegistry::default();
        let a = reg.open(Some(1), code(&m));
        let b = reg.open(Some(2), code(&m));
        assert_ne!(a, b);
        assert!(matches!(reg.get("nope"), Err(Error::SessionNotFound(_))));
        reg.close(&a).unwrap();
        assert!(reg.get(&a).is_err());
        assert_eq!(reg.len(), 1);
    }

    #[test]
    fn style_swap_is_an_involution() {
        let m = model();
        let a = code(&m);
        let mut b = code(&m);
        b.style = vec![-0.4; m.config.style_dim];
        b.handles[0].z = 0.5;
        let (ab, ba) = style_transfer(&a, &b);
        assert_eq!(ab.handles, a.handles);
        assert_eq!(ba.handles, b.handles);
        let (a2, b2) = style_transfer(&ab, &ba);
        assert_eq!((a2, b2), (a.clone(), b));
        let (aa, _) = style_transfer(&a, &a);
        assert_eq!(aa, a);
    }

    #[test]
    fn reencode_is_seeded() {
        let m = model();
        let c = code(&m);
        assert_eq!(reencode(&c, &m, 32, 5).unwrap(), reencode(&c, &m, 32, 5).unwrap());
        // The residual does not reach the decoder.
        let mut c2 = c.clone();
        c2.residual[0] += 1.0;
        assert_eq!(reencode(&c, &m, 32, 5).unwrap(), reencode(&c2, &m, 32, 5).unwrap());
    }

    #[test]
    fn reprojection_skips_zero_noise_and_stays_finite() {
        let m = model();
        let codes = vec![code(&m)];
        let zero = reprojection_experiment(&m, &codes, 5, 0.0, 32, 1).unwrap();
        assert_eq!((zero.trials, zero.skipped), (0, 5));
        let s = reprojection_experiment(&m, &codes, 5, 0.03, 32, 1).unwrap();
        assert_eq!(s.trials, 5);
        assert!(s.mean_fraction.is_finite() && s.median_fraction.is_finite());
    }

    #[test]
    fn identical_codes_are_equally_unique() {
        let m = model();
        let codes = vec![code(&m); 4];
        assert_eq!(uniqueness_scores(&codes), vec![0.0; 4]);
        let s = uniqueness_experiment(&m, &codes, 4, 2, 32, 9).unwrap();
        assert_eq!(s.unique_loss_pct, s.common_loss_pct);
        let mut u = s.unique_indices.clone();
        u.sort();
        assert_eq!(u, s.common_indices);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
