use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nudba::dba::{initialize, optimize, DbaConfig, DbaState, Observer, Problem, TraceEntry};
use nudba::eval::{evaluate, EvalOptions};
use nudba::io::{read_checkpoint, read_ply, read_toml, read_tum, write_checkpoint, write_ply, write_tum, Dataset};
use nudba::metrics::trajectory_of;
use nudba::synth::{synthesize, SceneConfig, SynthOptions};
use nudba::{Error, Result};

const CHECKPOINT: &str = "checkpoint.nuck";
const POSES: &str = "poses.txt";
const TRACE: &str = "trace.txt";
const MESH: &str = "mesh.ply";
const CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "nudba", version, about = "Dense geometric bundle adjustment over a neural SDF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with exact flow, disparity and images.
    Synth {
        /// Preset name (default, plane) or a scene TOML file.
        #[arg(long, default_value = "default")]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        /// Pose translation noise (scene units).
        #[arg(long, default_value_t = 0.0)]
        noise_trans: f64,
        /// Pose rotation noise (degrees).
        #[arg(long, default_value_t = 0.0)]
        noise_rot: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write backward flow for every pair.
        #[arg(long)]
        bidirectional: bool,
        /// Apply a per-frame exposure gain to the images.
        #[arg(long)]
        biased_albedo: bool,
    },
    /// Initialize from the road surface and run the joint optimization.
    Optimize {
        #[arg(long)]
        data: PathBuf,
        /// Optimizer TOML; the compact configuration is used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Single-threaded, reproducible run.
        #[arg(long)]
        serial: bool,
        /// Print every log line to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Marching cubes of a checkpoint's field to an ASCII PLY.
    ExtractMesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 160)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// ATE, mesh metrics and PSNR of an optimization result.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long, default_value_t = 160)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn scene_config(name: &str) -> Result<SceneConfig> {
    if let Some(c) = SceneConfig::preset(name) {
        return Ok(c);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "unknown scene {name:?}; presets are {}",
            SceneConfig::PRESETS.join(", ")
        )));
    }
    read_toml(path)
}

struct TraceLog {
    file: fs::File,
    path: PathBuf,
    verbose: bool,
    out: PathBuf,
    error: Option<Error>,
}

impl Observer for TraceLog {
    fn log(&mut self, e: &TraceEntry) {
        let ate = e.ate.map_or_else(|| "n/a".into(), |a| format!("{a:.6e}"));
        let line = format!("{} ate={ate} seconds={:.1}", e.report.log_line(e.iteration), e.seconds);
        if self.verbose {
            eprintln!("{line}");
        }
        if let Err(err) = writeln!(self.file, "{line}") {
            self.error.get_or_insert(Error::io(&self.path, err));
        }
    }

    fn checkpoint(&mut self, state: &DbaState) -> Result<()> {
        save_state(&self.out, state)
    }
}

fn save_state(out: &Path, state: &DbaState) -> Result<()> {
    write_checkpoint(&out.join(CHECKPOINT), &state.checkpoint())?;
    write_tum(&out.join(POSES), &trajectory_of(&state.frames))
}

fn load_config(path: Option<&Path>) -> Result<DbaConfig> {
    match path {
        Some(p) => read_toml(p),
        None => Ok(DbaConfig::compact()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            scene,
            out,
            noise_trans,
            noise_rot,
            seed,
            bidirectional,
            biased_albedo,
        } => {
            let config = scene_config(&scene)?;
            let opts = SynthOptions {
                sigma_trans: noise_trans,
                sigma_rot: noise_rot.to_radians(),
                seed,
                bidirectional,
                exposure_bias: biased_albedo,
                ..SynthOptions::default()
            };
            let ds = synthesize(&config, &opts)?;
            ds.save(&out)?;
            println!(
                "frames={} flow_pairs={} samples={} out={}",
                ds.poses.len(),
                ds.flows.len(),
                ds.gt_samples.as_ref().map_or(0, Vec::len),
                out.display()
            );
        }
        Command::Optimize {
            data,
            config,
            out,
            iterations,
            seed,
            serial,
            verbose,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(n) = iterations {
                cfg.total_iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.serial |= serial;
            let ds = Dataset::load(&data)?;
            let problem = Problem::from_dataset(&ds)?;
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            nudba::io::write_toml(&out.join(CONFIG), &cfg)?;
            let (mut state, init) = initialize(&problem, &cfg)?;
            eprintln!(
                "init points={} inliers={} plane_normal=[{:.4},{:.4},{:.4}] plane_offset={:.4} pretrain_rmse={:.4} leaves={}",
                init.triangulated,
                init.inliers,
                init.plane.normal.x,
                init.plane.normal.y,
                init.plane.normal.z,
                init.plane.offset,
                init.pretrain.rmse,
                init.occupied_leaves
            );
            let trace_path = out.join(TRACE);
            let file = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
            let mut log = TraceLog {
                file,
                path: trace_path,
                verbose,
                out: out.clone(),
                error: None,
            };
            let result = optimize(&problem, &mut state, &cfg, &mut log);
            // on divergence the state holds the last good checkpoint
            save_state(&out, &state)?;
            result?;
            if let Some(e) = log.error {
                return Err(e);
            }
            println!("iterations={} out={}", state.iteration, out.display());
        }
        Command::ExtractMesh {
            checkpoint,
            resolution,
            out,
        } => {
            let ck = read_checkpoint(&checkpoint)?;
            let state = DbaState::from_checkpoint(&ck, Vec::new())?;
            let mesh = nudba::dba::extract_mesh(&state.field, &state.store, &state.tree, resolution)?;
            write_ply(&out, &mesh)?;
            println!("vertices={} faces={} out={}", mesh.vertices.len(), mesh.faces.len(), out.display());
        }
        Command::Eval {
            data,
            result,
            threshold,
            resolution,
            seed,
        } => {
            let ds = Dataset::load(&data)?;
            let poses = read_tum(&result.join(POSES))?;
            let ck_path = result.join(CHECKPOINT);
            let problem = Problem::from_dataset(&ds)?;
            let state = if ck_path.exists() {
                let mut frames = problem.frames.clone();
                for (f, (id, p)) in frames.iter_mut().zip(&poses) {
                    if f.id != *id {
                        return Err(Error::CountMismatch(poses.len(), problem.frames.len()));
                    }
                    f.pose = *p;
                }
                Some(DbaState::from_checkpoint(&read_checkpoint(&ck_path)?, frames)?)
            } else {
                None
            };
            let mesh_path = result.join(MESH);
            let mesh = if mesh_path.exists() { Some(read_ply(&mesh_path)?) } else { None };
            let cfg_path = result.join(CONFIG);
            let cfg = load_config(cfg_path.exists().then_some(cfg_path.as_path()))?;
            let opts = EvalOptions {
                threshold,
                resolution,
                seed,
                ..EvalOptions::default()
            };
            let report = evaluate(&ds, &poses, state.as_ref(), mesh.as_ref(), &cfg, &opts)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
