//! Command-line front end and HTTP service for handle-driven shape editing.
//!
//! Every subcommand takes `--seed`; identical arguments and seed give
//! byte-identical outputs. Usage errors exit with 2, runtime errors with 1.

pub mod commands;
pub mod service;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "handlefield", version, about = "Train, edit and evaluate handle-driven SDF autoencoders")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Log progress to stderr (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Tables,
    Boxes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The full-size architecture.
    Full,
    /// Reduced widths that train on a single core.
    Desk,
    /// A few hundred parameters, for smoke tests.
    Tiny,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trained autoencoder checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file the shape ids refer to.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Grid points per axis for marching cubes.
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    /// Isosurface level in [0, 0.05].
    #[arg(long, default_value_t = 0.0)]
    pub level: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a procedural shape collection to a dataset file.
    GenerateData {
        #[arg(long, value_enum, default_value_t = Family::Tables)]
        family: Family,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 2048)]
        n_uniform: usize,
        #[arg(long, default_value_t = 2048)]
        n_surface: usize,
        #[arg(long, default_value_t = 8)]
        handles: usize,
        /// Extra shapes at the extremes of the parameter ranges.
        #[arg(long, default_value_t = 0)]
        outliers: usize,
        /// Ordinary shapes use the parameter ranges shrunk by this factor.
        #[arg(long, default_value_t = 1.0)]
        central_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the point-cloud canonicalizer on a dataset's surfaces.
    TrainCanonicalizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        /// Points per cloud and decoded points per shape.
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
    },
    /// Pick consistent handles with a trained canonicalizer.
    DeriveHandles {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        canonicalizer: PathBuf,
        #[arg(long, default_value_t = 8)]
        handles: usize,
        /// Surface points per shape fed to the canonicalizer.
        #[arg(long, default_value_t = 2048)]
        input_points: usize,
        /// Surface points per shape the handles snap to.
        #[arg(long, default_value_t = 4096)]
        snap_points: usize,
        /// Handle JSON output.
        #[arg(long)]
        out: PathBuf,
        /// Also write a copy of the dataset with the handles embedded.
        #[arg(long)]
        write_data: Option<PathBuf>,
    },
    /// Stage 1: regress the handle encoder onto the canonical handles.
    PretrainHandles {
        #[arg(long)]
        data: PathBuf,
        /// Handle JSON to apply first (hand-picked or derived).
        #[arg(long)]
        handles_file: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 2048)]
        n_uniform: usize,
    },
    /// Stage 2: train style, residual and decoder with the handle encoder frozen.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        handles_file: Option<PathBuf>,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint directory, rewritten as training proceeds.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`, optimizer state included.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 600)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 2e-4)]
        late_lr: f64,
        /// Epoch at which the learning rate drops (default: half way).
        #[arg(long)]
        lr_drop_epoch: Option<usize>,
        #[arg(long, default_value_t = 2048)]
        n_uniform: usize,
        #[arg(long, default_value_t = 2048)]
        n_surface: usize,
        #[arg(long, default_value_t = 50)]
        checkpoint_every: usize,
        /// Per-epoch loss log, one JSON object per line.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Move handles of one shape and write the edited mesh.
    Edit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        shape_id: u64,
        /// `HANDLE:X,Y,Z`, repeatable.
        #[arg(long = "move", value_parser = parse_move, required = true)]
        moves: Vec<(usize, [f64; 3])>,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long, default_value_t = 0.075)]
        max_step: f64,
        #[command(flatten)]
        mesh: MeshArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-round latent snapshots as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Swap styles between two shapes and write both meshes.
    StyleTransfer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        a: u64,
        #[arg(long)]
        b: u64,
        #[command(flatten)]
        mesh: MeshArgs,
        /// Receives handles of `a` with the style of `b`.
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
    },
    /// Label surface samples of one shape by the handle that controls them.
    Segment {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        shape_id: u64,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// JSON array of `[x, y, z]` points; defaults to the shape's surface.
        #[arg(long)]
        samples_file: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 1024)]
        repetitions: usize,
        #[arg(long, default_value_t = 0.25)]
        sigma_scale: f64,
        /// Labels JSON array aligned with the sample order.
        #[arg(long)]
        out: PathBuf,
        /// The samples used, as JSON.
        #[arg(long)]
        samples_out: Option<PathBuf>,
        /// Mesh colored by the nearest sample's label.
        #[arg(long)]
        obj: Option<PathBuf>,
        #[arg(long, default_value_t = 96)]
        resolution: usize,
    },
    /// Coverage and minimum matching distance of generated variations.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 500)]
        a_cap: usize,
        #[arg(long, default_value_t = 20)]
        variations: usize,
        #[arg(long, default_value_t = 4096)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        iterations: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// How much random latent noise one projection removes.
    ReprojectExp {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0.03)]
        noise: f64,
        #[arg(long, default_value_t = 2048)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edit loss of unique shapes against common ones.
    UniqueExp {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        n_extreme: usize,
        #[arg(long, default_value_t = 10)]
        shifts: usize,
        #[arg(long, default_value_t = 2048)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one shape and write its isosurface as OBJ.
    ExtractMesh {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        shape_id: u64,
        #[command(flatten)]
        mesh: MeshArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve editing sessions over HTTP and WebSocket.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value_t = 96)]
        resolution: usize,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        #[arg(long, default_value_t = 64)]
        max_sessions: usize,
        #[arg(long, default_value_t = 2048)]
        reencode_samples: usize,
    },
}

pub fn parse_move(s: &str) -> Result<(usize, [f64; 3]), String> {
    let (h, xyz) = s.split_once(':').ok_or_else(|| format!("expected HANDLE:X,Y,Z, got {s:?}"))?;
    let handle = h.trim().parse::<usize>().map_err(|e| format!("bad handle index {h:?}: {e}"))?;
    let v: Vec<f64> = xyz
        .split(',')
        .map(|c| c.trim().parse::<f64>().map_err(|e| format!("bad coordinate {c:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok((handle, [*x, *y, *z])),
        _ => Err(format!("expected three finite coordinates, got {xyz:?}")),
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match commands::execute(cli.command, cli.seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moves_parse() {
        assert_eq!(parse_move("3:0.1,-0.2, 0.5"), Ok((3, [0.1, -0.2, 0.5])));
        assert!(parse_move("3:0.1,0.2").is_err());
        assert!(parse_move("x:0,0,0").is_err());
        assert!(parse_move("1:nan,0,0").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
