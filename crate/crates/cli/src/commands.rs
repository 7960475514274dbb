//! Subcommand implementations. Outputs are written only after the work
//! succeeds, so a failed run leaves no partial files behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use handlefield::autoencoder::{
    pretrain_handle_encoder, train, LatentCode, Manifest, Model, ModelConfig, PretrainConfig, TrainConfig,
    CHECKPOINT_VERSION,
};
use handlefield::canonicalizer::{
    dataset_clouds, derive_canonical_handles, mean_shape, train_canonicalizer, CanonTrainConfig, CanonicalHandles,
    CanonicalizerConfig, CanonicalizerModel,
};
use handlefield::dataset::{generate_dataset, Dataset, GenerateConfig};
use handlefield::editing::{
    edit_handles, encode_dataset, extract_mesh, reprojection_experiment, style_transfer, uniqueness_experiment,
    EditRequest, EditSession, ProjectionConfig,
};
use handlefield::evaluation::{evaluate, EvalConfig, VariationConfig};
use handlefield::geometry::{nearest_indices, Point3, ShapeFamily, TriangleMesh};
use handlefield::nn::{AdamW, ParamStore};
use handlefield::segmentation::{segment, SegmentationConfig};
use log::info;
use serde::Serialize;

use crate::{Command, Family, MeshArgs, ModelArgs, Preset};

pub const MAX_LEVEL: f64 = 0.05;

/// Distinct colors for segment labels; labels beyond the palette wrap.
const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.30, 0.25],
    [0.25, 0.55, 0.90],
    [0.30, 0.75, 0.35],
    [0.95, 0.75, 0.20],
    [0.60, 0.35, 0.80],
    [0.20, 0.80, 0.80],
    [0.90, 0.50, 0.70],
    [0.55, 0.55, 0.55],
];

impl MeshArgs {
    fn check(&self) -> Result<()> {
        check_mesh(self.resolution, self.level)
    }
}

pub fn check_mesh(resolution: usize, level: f64) -> Result<()> {
    ensure!(resolution >= 8, "mesh resolution {resolution} is below 8");
    ensure!((0.0..=MAX_LEVEL).contains(&level), "isosurface level {level} outside [0, {MAX_LEVEL}]");
    Ok(())
}

pub fn model_config(preset: Preset, handle_count: usize) -> ModelConfig {
    match preset {
        Preset::Full => ModelConfig { handle_count, ..ModelConfig::default() },
        Preset::Desk => ModelConfig::desk(handle_count),
        Preset::Tiny => ModelConfig::tiny(handle_count),
    }
}

pub fn canonicalizer_config(preset: Preset, points: usize) -> CanonicalizerConfig {
    match preset {
        Preset::Full => CanonicalizerConfig { output_points: points, ..CanonicalizerConfig::default() },
        Preset::Desk => CanonicalizerConfig {
            output_points: points,
            embed_channels: vec![32, 64, 128],
            encoder_head: vec![64, 32],
            decoder_hidden: vec![64, 128],
            ..CanonicalizerConfig::default()
        },
        Preset::Tiny => CanonicalizerConfig {
            output_points: points,
            embed_channels: vec![8, 16],
            encoder_head: vec![16, 8],
            decoder_hidden: vec![16],
            ..CanonicalizerConfig::default()
        },
    }
}

fn read_data(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_data_with_handles(path: &Path, handles: Option<&Path>) -> Result<Dataset> {
    let mut ds = read_data(path)?;
    if let Some(h) = handles {
        let handles = CanonicalHandles::read(h).with_context(|| format!("reading handles {}", h.display()))?;
        handles.apply_to(&mut ds)?;
    }
    ensure!(ds.has_handles(), "dataset has no handles; pass --handles-file or run derive-handles");
    Ok(ds)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let (model, _) = Model::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(model)
}

fn load(args: &ModelArgs) -> Result<(Model, Dataset)> {
    let model = load_model(&args.checkpoint)?;
    let ds = read_data(&args.data)?;
    Ok((model, ds))
}

pub fn encode_shape(model: &Model, ds: &Dataset, shape_id: u64) -> Result<LatentCode> {
    Ok(model.encode(&ds.get(shape_id)?.sampling.uniform)?)
}

fn mesh_of(model: &Model, code: &LatentCode, mesh: &MeshArgs) -> Result<TriangleMesh> {
    let m = extract_mesh(model, code, mesh.resolution, mesh.level)?;
    ensure!(!m.is_empty(), "decoded field has no surface at level {}", mesh.level);
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest_for(model: &Model, epoch: usize, train: Option<TrainConfig>) -> Manifest {
    Manifest {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        lambdas: train.as_ref().map(|t| t.lambdas).unwrap_or_default(),
        handle_count: model.config.handle_count,
        epoch,
        handle_encoder_frozen: model.handle_encoder_frozen(),
        train,
    }
}

pub fn label_colors(mesh: &TriangleMesh, samples: &[Point3], labels: &[usize]) -> Result<Vec<[f32; 3]>> {
    let nearest = nearest_indices(samples, &mesh.vertices)?;
    Ok(nearest.into_iter().map(|i| PALETTE[labels[i] % PALETTE.len()]).collect())
}

pub fn execute(command: Command, seed: u64) -> Result<()> {
    match command {
        Command::GenerateData { family, count, n_uniform, n_surface, handles, outliers, central_fraction, out } => {
            ensure!(handles > 0, "--handles must be positive");
            ensure!(central_fraction > 0.0 && central_fraction <= 1.0, "--central-fraction must lie in (0, 1]");
            let family = match family {
                Family::Tables => ShapeFamily::ProcTables,
                Family::Boxes => ShapeFamily::ProcBoxes,
            };
            let cfg = GenerateConfig {
                n_uniform,
                n_surface,
                handle_count: handles,
                central_fraction,
                outliers,
                ..GenerateConfig::new(family, count, seed)
            };
            let ds = generate_dataset(&cfg)?;
            ds.write(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} shapes to {}", ds.len(), out.display());
        }
        Command::TrainCanonicalizer { data, out, epochs, points, batch_size, lr, preset } => {
            let ds = read_data(&data)?;
            let clouds = dataset_clouds(&ds, points, seed);
            let cfg = CanonTrainConfig { epochs, batch_size, input_points: points, learning_rate: lr, seed };
            let (model, history) = train_canonicalizer(&clouds, canonicalizer_config(preset, points), &cfg)?;
            model.save(&out, epochs)?;
            write_json(&out.join("history.json"), &history)?;
            println!("canonicalizer chamfer {:.5} after {epochs} epochs", history.last().copied().unwrap_or(f64::NAN));
        }
        Command::DeriveHandles { data, canonicalizer, handles, input_points, snap_points, out, write_data } => {
            let mut ds = read_data(&data)?;
            let canon = CanonicalizerModel::load(&canonicalizer)?;
            let clouds = dataset_clouds(&ds, input_points, seed);
            let snap = dataset_clouds(&ds, snap_points, seed.wrapping_add(1));
            let mean = mean_shape(&canon, &clouds)?;
            let derived = derive_canonical_handles(&canon, &mean, &clouds, &snap, &ds.ids(), handles)?;
            if let Some(path) = write_data {
                derived.apply_to(&mut ds)?;
                ds.write(&path).with_context(|| format!("writing {}", path.display()))?;
            }
            derived.write(&out)?;
            println!("derived {handles} handles for {} shapes", ds.len());
        }
        Command::PretrainHandles { data, handles_file, out, preset, epochs, batch_size, lr, n_uniform } => {
            let ds = read_data_with_handles(&data, handles_file.as_deref())?;
            let h = ds.shapes[0].handles.as_ref().map_or(ds.handle_count, |v| v.len());
            let mut model = Model::new(model_config(preset, h), seed)?;
            let cfg = PretrainConfig { epochs, batch_size, learning_rate: lr, n_uniform, seed, ..PretrainConfig::default() };
            let report = pretrain_handle_encoder(&mut model, &ds, &cfg)?;
            model.save(&out, &manifest_for(&model, 0, None), None)?;
            write_json(&out.join("pretrain.json"), &report)?;
            println!(
                "handle error: train {:.4}, holdout {}",
                report.train_error,
                report.holdout_error.map_or("n/a".into(), |e| format!("{e:.4}"))
            );
        }
        Command::Train {
            data,
            handles_file,
            init,
            out,
            resume,
            epochs,
            batch_size,
            lr,
            late_lr,
            lr_drop_epoch,
            n_uniform,
            n_surface,
            checkpoint_every,
            metrics,
        } => {
            let ds = read_data_with_handles(&data, handles_file.as_deref())?;
            let requested = TrainConfig {
                epochs,
                batch_size,
                learning_rate: lr,
                late_learning_rate: late_lr,
                lr_drop_epoch: lr_drop_epoch.unwrap_or(epochs / 2),
                n_uniform,
                n_surface,
                seed,
                ..TrainConfig::default()
            };
            let (mut model, mut opt, cfg, start) = if resume {
                let mut opt = AdamW::new(&ParamStore::new(), requested.optimizer());
                let (model, manifest) = Model::load_with_optimizer(&out, &mut opt)
                    .with_context(|| format!("resuming from {}", out.display()))?;
                // The stored schedule wins so that a resumed run follows the original trajectory.
                let stored = manifest.train.context("checkpoint has no training configuration to resume")?;
                let cfg = TrainConfig { epochs, ..stored };
                ensure!(manifest.epoch <= epochs, "checkpoint is at epoch {}, beyond --epochs {epochs}", manifest.epoch);
                (model, opt, cfg, manifest.epoch)
            } else {
                let init = init.context("--init (a pre-trained checkpoint) is required unless --resume is given")?;
                let model = load_model(&init)?;
                ensure!(model.handle_encoder_frozen(), "{} has no frozen handle encoder", init.display());
                let opt = AdamW::new(&model.store, requested.optimizer());
                (model, opt, requested, 0)
            };
            ensure!(checkpoint_every > 0, "--checkpoint-every must be positive");
            let mut log = match &metrics {
                Some(p) => Some(
                    fs::OpenOptions::new()
                        .create(true)
                        .append(resume)
                        .write(true)
                        .truncate(!resume)
                        .open(p)
                        .with_context(|| format!("opening {}", p.display()))?,
                ),
                None => None,
            };
            let report = train(&mut model, &mut opt, &ds, &cfg, start, |m, model, opt| {
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(m)?)?;
                }
                let done = m.epoch + 1;
                if done % checkpoint_every == 0 || done == cfg.epochs {
                    model.checkpoint(&out, &manifest_for(model, done, Some(cfg.clone())), opt)?;
                }
                info!("epoch {}: rec {:.5} lip {:.5} ind {:.5}", m.epoch, m.l_rec, m.l_lip, m.l_ind);
                Ok(())
            })?;
            if start == cfg.epochs {
                model.checkpoint(&out, &manifest_for(&model, start, Some(cfg.clone())), &mut opt)?;
            }
            match report.metrics.last() {
                Some(m) => println!("epoch {}: rec {:.5}, holdout rec {:?}", m.epoch, m.l_rec, m.holdout_rec),
                None => println!("nothing to train: checkpoint already at epoch {start}"),
            }
        }
        Command::Edit { model: args, shape_id, moves, rounds, max_step, mesh, out, history } => {
            mesh.check()?;
            let (model, ds) = load(&args)?;
            let code = encode_shape(&model, &ds, shape_id)?;
            let mut session = EditSession::new("cli", Some(shape_id), code);
            let request = EditRequest::new(moves.iter().map(|&(i, p)| (i, Point3::from_array(p))).collect());
            let cfg = ProjectionConfig {
                max_step,
                max_rounds: rounds,
                mesh_resolution: mesh.resolution,
                mesh_level: mesh.level,
                seed,
                ..ProjectionConfig::default()
            };
            let outcome = edit_handles(&model, &mut session, &request, &cfg)?;
            ensure!(!outcome.mesh.is_empty(), "edited shape has no surface at level {}", mesh.level);
            if let Some(p) = history {
                write_json(&p, &session.history)?;
            }
            write_text(&out, &outcome.mesh.to_obj())?;
            println!("{} rounds{}", outcome.rounds, if outcome.stopped_early { ", stopped early" } else { "" });
        }
        Command::StyleTransfer { model: args, a, b, mesh, out_a, out_b } => {
            mesh.check()?;
            let (model, ds) = load(&args)?;
            let (ab, ba) = style_transfer(&encode_shape(&model, &ds, a)?, &encode_shape(&model, &ds, b)?);
            let (ma, mb) = (mesh_of(&model, &ab, &mesh)?, mesh_of(&model, &ba, &mesh)?);
            write_text(&out_a, &ma.to_obj())?;
            write_text(&out_b, &mb.to_obj())?;
        }
        Command::Segment {
            model: args,
            shape_id,
            k,
            samples_file,
            samples,
            repetitions,
            sigma_scale,
            out,
            samples_out,
            obj,
            resolution,
        } => {
            check_mesh(resolution, 0.0)?;
            let (model, ds) = load(&args)?;
            let code = encode_shape(&model, &ds, shape_id)?;
            let points: Vec<Point3> = match &samples_file {
                Some(p) => {
                    let raw: Vec<[f64; 3]> = serde_json::from_str(
                        &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                    )
                    .with_context(|| format!("parsing {}", p.display()))?;
                    raw.into_iter().map(Point3::from_array).collect()
                }
                None => ds.get(shape_id)?.surface_cloud(samples, seed),
            };
            ensure!(points.len() > k, "need more than {k} samples, got {}", points.len());
            let cfg = SegmentationConfig { parts: k, repetitions, sigma_scale, seed, ..SegmentationConfig::default() };
            let labels = segment(&model, &code, &points, &cfg)?;
            let colored = match &obj {
                Some(_) => {
                    let m = extract_mesh(&model, &code, resolution, 0.0)?;
                    if m.is_empty() {
                        bail!("decoded field has no surface to color");
                    }
                    Some(m.to_obj_colored(&label_colors(&m, &points, &labels)?))
                }
                None => None,
            };
            write_json(&out, &labels)?;
            if let Some(p) = samples_out {
                write_json(&p, &points.iter().map(|p| p.to_array()).collect::<Vec<_>>())?;
            }
            if let (Some(p), Some(text)) = (obj, colored) {
                write_text(&p, &text)?;
            }
            let mut sizes = vec![0usize; k];
            for &l in &labels {
                sizes[l] += 1;
            }
            println!("segment sizes {sizes:?}");
        }
        Command::Eval { model: args, a_cap, variations, points, iterations, resolution, out } => {
            check_mesh(resolution, 0.0)?;
            let (model, ds) = load(&args)?;
            let cfg = EvalConfig {
                a_cap,
                variations_per_item: variations,
                variation: VariationConfig { iterations, mesh_resolution: resolution, points, ..VariationConfig::default() },
                seed,
            };
            let report = evaluate(&model, &ds, &cfg)?;
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            print!("{}", report.table());
        }
        Command::ReprojectExp { model: args, trials, noise, samples, out } => {
            let (model, ds) = load(&args)?;
            let codes: Vec<LatentCode> = encode_dataset(&model, &ds)?.into_iter().map(|(_, c)| c).collect();
            let stats = reprojection_experiment(&model, &codes, trials, noise, samples, seed)?;
            if let Some(p) = out {
                write_json(&p, &stats)?;
            }
            println!(
                "remaining noise fraction: mean {:.4}, median {:.4}, below one {:.1}% ({} trials, {} skipped)",
                stats.mean_fraction,
                stats.median_fraction,
                100.0 * stats.below_one,
                stats.trials,
                stats.skipped
            );
        }
        Command::UniqueExp { model: args, n_extreme, shifts, samples, out } => {
            let (model, ds) = load(&args)?;
            let encoded = encode_dataset(&model, &ds)?;
            let codes: Vec<LatentCode> = encoded.iter().map(|(_, c)| c.clone()).collect();
            let stats = uniqueness_experiment(&model, &codes, n_extreme, shifts, samples, seed)?;
            #[derive(Serialize)]
            struct Report<'a> {
                #[serde(flatten)]
                stats: &'a handlefield::editing::UniquenessStats,
                unique_ids: Vec<u64>,
                common_ids: Vec<u64>,
            }
            let ids = |idx: &[usize]| idx.iter().map(|&i| encoded[i].0).collect::<Vec<_>>();
            let report = Report { unique_ids: ids(&stats.unique_indices), common_ids: ids(&stats.common_indices), stats: &stats };
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            println!("edit loss: unique {:.2}%, common {:.2}%", stats.unique_loss_pct, stats.common_loss_pct);
        }
        Command::ExtractMesh { model: args, shape_id, mesh, out } => {
            mesh.check()?;
            let (model, ds) = load(&args)?;
            let m = mesh_of(&model, &encode_shape(&model, &ds, shape_id)?, &mesh)?;
            write_text(&out, &m.to_obj())?;
            println!("{} vertices, {} triangles", m.vertices.len(), m.triangles.len());
        }
        Command::Serve { model: args, bind, resolution, level, max_sessions, reencode_samples } => {
            check_mesh(resolution, level)?;
            let (model, ds) = load(&args)?;
            let cfg = crate::service::ServiceConfig {
                resolution,
                level,
                max_sessions,
                projection: ProjectionConfig { reencode_sample_count: reencode_samples, seed, ..ProjectionConfig::default() },
                seed,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::service::serve(&bind, model, ds, cfg))?;
        }
    }
    Ok(())
}
