//! `anytime-lstm` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 data/format/I/O, 4 infeasible or
//! numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anytime_lstm::approx::{decompose, infer_progressive, Budget};
use anytime_lstm::dse::{
    designs_to_csv, designs_to_json, pareto_front, select_best, sweep, SweepGrid, SweepOptions, TilingMode,
};
use anytime_lstm::io::{gen_pilot, gen_synthetic, load_approx, load_dataset, load_model, save_approx, save_dataset, save_model};
use anytime_lstm::perfmodel::{
    approx_schedule, baseline_schedule, best_tiling, roofline_point, DesignPoint, ModelDims, PlatformModel, Workload,
};
use anytime_lstm::qor::{compare_baseline, profile_raw, record_from_raw, ComparisonSetup, Recurrence};
use anytime_lstm::{ApproxLstm, Error, ErrorCategory, Gate, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Environment variable naming the default platform configuration file.
const PLATFORM_ENV: &str = "ANYTIME_LSTM_PLATFORM";

/// Above this augmented width decomposition takes a while.
const LARGE_AUG_DIM: usize = 4096;

#[derive(Parser)]
#[command(name = "anytime-lstm", version, about = "Progressive LSTM inference toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic model container.
    GenModel {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        hidden_dim: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded pilot dataset of standard-normal frames.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frame_dim: usize,
        #[arg(long, default_value_t = 1)]
        sequences: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose a model and write the container plus residuals.csv.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nz: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run budgeted progressive inference over a dataset.
    Infer {
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
        #[command(flatten)]
        platform: PlatformArgs,
        #[command(flatten)]
        tiling: TilingArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step KL statistics of a decomposition against its source model.
    ProfileQor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Start every frame from the reference recurrent state.
        #[arg(long)]
        teacher_forced: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-frame KL values.
        #[arg(long)]
        raw_csv: Option<PathBuf>,
    },
    /// Median KL of approximate and tiled-baseline inference at equal
    /// modeled-time budgets.
    CompareBaseline {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        approx: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
        /// Budgets in seconds, comma separated, ascending.
        #[arg(long, value_delimiter = ',', conflicts_with = "fractions", required_unless_present = "fractions")]
        budgets: Vec<f64>,
        /// Budgets as fractions of the modeled baseline latency.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep (nz, n_steps[, t_r, t_c]) and report designs, Pareto front and
    /// an optional constrained selection.
    Dse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        nz: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<usize>,
        /// Sweep the given tile sizes instead of the fastest feasible pair.
        #[arg(long, requires_all = ["t_r", "t_c"])]
        explicit_tiling: bool,
        #[arg(long = "tile-r", value_delimiter = ',')]
        t_r: Vec<usize>,
        #[arg(long = "tile-c", value_delimiter = ',')]
        t_c: Vec<usize>,
        #[arg(long)]
        teacher_forced: bool,
        #[arg(long, requires = "kl_target")]
        latency_budget: Option<f64>,
        #[arg(long, requires = "latency_budget")]
        kl_target: Option<f64>,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Roofline coordinates of design points plus the platform ceilings.
    Roofline {
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        hidden_dim: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        nz: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        steps: Vec<usize>,
        #[command(flatten)]
        platform: PlatformArgs,
        #[command(flatten)]
        tiling: TilingArgs,
        /// Add the dense baseline design.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct BudgetArgs {
    /// Refinement steps per frame.
    #[arg(long)]
    steps: Option<usize>,
    /// Modeled seconds per frame.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Wall-clock seconds per frame; output depends on the machine.
    #[arg(long)]
    wall_clock: Option<f64>,
}

#[derive(Args)]
struct PlatformArgs {
    /// Platform TOML file; falls back to $ANYTIME_LSTM_PLATFORM, then to
    /// built-in defaults.
    #[arg(long)]
    platform: Option<PathBuf>,
}

impl PlatformArgs {
    fn load(&self) -> Result<PlatformModel> {
        match &self.platform {
            Some(p) => PlatformModel::load(p),
            None => match std::env::var_os(PLATFORM_ENV) {
                Some(p) if !p.is_empty() => PlatformModel::load(Path::new(&p)),
                _ => Ok(PlatformModel::default()),
            },
        }
    }
}

#[derive(Args)]
struct TilingArgs {
    /// Row tile size; with --tile-c, overrides the fastest feasible tiling.
    #[arg(long = "tile-r", requires = "tile_c")]
    tile_r: Option<usize>,
    #[arg(long = "tile-c", requires = "tile_r")]
    tile_c: Option<usize>,
}

impl TilingArgs {
    fn design(&self, dims: ModelDims, workload: Workload, platform: &PlatformModel) -> Result<DesignPoint> {
        match (self.tile_r, self.tile_c) {
            (Some(r), Some(c)) => roofline_point(dims, workload, r, c, platform),
            _ => best_tiling(dims, workload, platform),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Usage => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Infeasible => 4,
            })
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn approx_dims(a: &ApproxLstm) -> Result<ModelDims> {
    ModelDims::new(a.input_dim(), a.hidden_dim())
}

fn run(command: Command) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match command {
        Command::GenModel {
            seed,
            input_dim,
            hidden_dim,
            actions,
            out,
        } => {
            if input_dim + hidden_dim > LARGE_AUG_DIM {
                log::warn!(
                    "augmented width {} is large; decomposing this model will be slow",
                    input_dim + hidden_dim
                );
            }
            let model = gen_synthetic(seed, input_dim, hidden_dim, actions)?;
            let manifest = save_model(&model, &out)?;
            writeln!(stdout, "{}", manifest.content_hash).ok();
        }
        Command::GenData {
            seed,
            frame_dim,
            sequences,
            frames,
            out,
        } => {
            if frame_dim == 0 || sequences == 0 || frames == 0 {
                return Err(Error::InvalidArgument("dataset dimensions must be positive".into()));
            }
            let ds = gen_pilot(seed, frame_dim, sequences, frames);
            save_dataset(&ds, &out)?;
            writeln!(stdout, "{}", ds.content_hash()).ok();
        }
        Command::Decompose { model, nz, steps, out } => {
            let model = load_model(&model)?;
            if model.aug_dim() > LARGE_AUG_DIM {
                log::warn!("decomposing a {}-wide model; this will be slow", model.aug_dim());
            }
            let approx = decompose(&model, nz, steps)?;
            save_approx(&approx, &out)?;
            let mut w = csv_writer();
            w.write_record(["gate", "step", "residual_fro_norm"]).map_err(csv_err)?;
            for g in Gate::ALL {
                for (n, r) in approx.gate(g).residual_fro_norms.iter().enumerate() {
                    w.write_record([g.tag().to_string(), n.to_string(), r.to_string()])
                        .map_err(csv_err)?;
                }
            }
            write_file(&out.join("residuals.csv"), &finish_csv(w)?)?;
            if !approx.full_occupancy() {
                log::warn!("some refinement steps keep fewer than nz entries; op counts use actual nnz");
            }
            writeln!(stdout, "decomposed nz={nz} steps={steps} into {}", out.display()).ok();
        }
        Command::Infer {
            approx,
            data,
            budget,
            platform,
            tiling,
            out,
        } => {
            let approx = load_approx(&approx)?;
            let ds = load_dataset(&data)?;
            let budget = if let Some(k) = budget.steps {
                Budget::Steps(k)
            } else if let Some(seconds) = budget.time_budget {
                let platform = platform.load()?;
                let cfg = approx.config();
                let dp = tiling.design(
                    approx_dims(&approx)?,
                    Workload::Approx {
                        nz: cfg.nz,
                        n_steps: cfg.n_steps,
                    },
                    &platform,
                )?;
                Budget::ModeledTime {
                    seconds,
                    schedule: approx_schedule(&approx, &dp)?,
                }
            } else {
                let s = budget.wall_clock.unwrap_or_default();
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::InvalidArgument("wall-clock budget must be nonnegative".into()));
                }
                Budget::WallClock(Duration::from_secs_f64(s))
            };
            let mut w = csv_writer();
            let mut header = vec!["sequence".to_string(), "frame".into(), "steps_used".into(), "fallback".into()];
            header.extend((0..approx.actions()).map(|a| format!("p{a}")));
            w.write_record(&header).map_err(csv_err)?;
            let mut fallbacks = 0;
            for (s, seq) in ds.sequences.iter().enumerate() {
                for e in infer_progressive(&approx, seq, &budget)? {
                    fallbacks += usize::from(e.fallback);
                    let mut row = vec![s.to_string(), e.frame.to_string(), e.steps_used.to_string(), e.fallback.to_string()];
                    row.extend(e.distribution.probs.iter().map(|p| p.to_string()));
                    w.write_record(&row).map_err(csv_err)?;
                }
            }
            write_file(&out, &finish_csv(w)?)?;
            if fallbacks > 0 {
                log::warn!("{fallbacks} frames emitted the zero-step fallback output");
            }
            writeln!(stdout, "{} frames written to {}", ds.frame_count(), out.display()).ok();
        }
        Command::ProfileQor {
            model,
            approx,
            data,
            teacher_forced,
            out,
            raw_csv,
        } => {
            let model = load_model(&model)?;
            let approx = load_approx(&approx)?;
            let ds = load_dataset(&data)?;
            let rec_mode = if teacher_forced {
                Recurrence::TeacherForced
            } else {
                Recurrence::SelfConsistent
            };
            let raw = profile_raw(&model, &approx, &ds, rec_mode)?;
            let record = record_from_raw(approx.config(), rec_mode, &ds, &raw)?;
            write_file(&out, &to_json(&record)?)?;
            if let Some(path) = raw_csv {
                let mut w = csv_writer();
                w.write_record(["steps", "frame", "kl"]).map_err(csv_err)?;
                for (k, kls) in raw.iter().enumerate() {
                    for (f, kl) in kls.iter().enumerate() {
                        w.write_record([(k + 1).to_string(), f.to_string(), kl.to_string()])
                            .map_err(csv_err)?;
                    }
                }
                write_file(&path, &finish_csv(w)?)?;
            }
            writeln!(stdout, "median KL at {} steps: {:e}", approx.n_steps(), record.final_median()).ok();
        }
        Command::CompareBaseline {
            model,
            approx,
            data,
            platform,
            budgets,
            fractions,
            out,
        } => {
            let model = load_model(&model)?;
            let approx = load_approx(&approx)?;
            let ds = load_dataset(&data)?;
            let platform = platform.load()?;
            let dims = approx_dims(&approx)?;
            let cfg = approx.config();
            let approx_dp = best_tiling(
                dims,
                Workload::Approx {
                    nz: cfg.nz,
                    n_steps: cfg.n_steps,
                },
                &platform,
            )?;
            let base_dp = best_tiling(dims, Workload::Baseline, &platform)?;
            let budgets = if budgets.is_empty() {
                fractions.iter().map(|f| f * base_dp.modeled_latency).collect()
            } else {
                budgets
            };
            let setup = ComparisonSetup {
                approx_schedule: approx_schedule(&approx, &approx_dp)?,
                baseline_schedule: baseline_schedule(dims, &base_dp)?,
                baseline_t_r: base_dp.t_r,
                baseline_t_c: base_dp.t_c,
            };
            let rows = compare_baseline(&model, &approx, &ds, &setup, &budgets)?;
            let mut w = csv_writer();
            for r in &rows {
                w.serialize(r).map_err(csv_err)?;
            }
            write_file(&out, &finish_csv(w)?)?;
            let wins = rows.iter().filter(|r| r.approx_median_kl <= r.baseline_median_kl).count();
            writeln!(
                stdout,
                "approximate KL <= baseline KL at {wins} of {} budgets (baseline latency {:e} s)",
                rows.len(),
                base_dp.modeled_latency
            )
            .ok();
        }
        Command::Dse {
            model,
            data,
            platform,
            nz,
            steps,
            explicit_tiling,
            t_r,
            t_c,
            teacher_forced,
            latency_budget,
            kl_target,
            out_csv,
            out_json,
        } => {
            let model = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let platform = platform.load()?;
            let grid = SweepGrid {
                nz_values: nz,
                n_steps_values: steps,
                t_r_values: t_r,
                t_c_values: t_c,
            };
            let options = SweepOptions {
                tiling: if explicit_tiling {
                    TilingMode::Explicit
                } else {
                    TilingMode::Optimal
                },
                recurrence: if teacher_forced {
                    Recurrence::TeacherForced
                } else {
                    Recurrence::SelfConsistent
                },
            };
            let result = sweep(&model, &grid, &platform, &ds, options)?;
            write_file(&out_csv, designs_to_csv(&result.designs)?.as_bytes())?;
            let front = pareto_front(&result.designs);
            let selection = match (latency_budget, kl_target) {
                (Some(b), Some(t)) => Some(select_best(&result.designs, b, t)?),
                _ => None,
            };
            #[derive(Serialize)]
            struct Report<'a> {
                designs: serde_json::Value,
                infeasible: &'a [anytime_lstm::dse::InfeasiblePoint],
                pareto_front: Vec<(usize, usize, usize, usize)>,
                selection: Option<&'a anytime_lstm::dse::Selection>,
            }
            let designs: serde_json::Value =
                serde_json::from_str(&designs_to_json(&result.designs)?).map_err(|e| Error::Format(e.to_string()))?;
            let report = Report {
                designs,
                infeasible: &result.infeasible,
                pareto_front: front.iter().map(|d| d.key()).collect(),
                selection: selection.as_ref(),
            };
            write_file(&out_json, &to_json(&report)?)?;
            writeln!(
                stdout,
                "{} designs, {} infeasible, {} on the Pareto front",
                result.designs.len(),
                result.infeasible.len(),
                front.len()
            )
            .ok();
            if let Some(s) = &selection {
                let (a, b, c, d) = s.design.key();
                writeln!(
                    stdout,
                    "selected nz={a} n_steps={b} t_r={c} t_c={d}{}",
                    if s.target_missed { " (KL target missed)" } else { "" }
                )
                .ok();
            }
        }
        Command::Roofline {
            input_dim,
            hidden_dim,
            nz,
            steps,
            platform,
            tiling,
            baseline,
            out,
        } => {
            let dims = ModelDims::new(input_dim, hidden_dim)?;
            let platform = platform.load()?;
            let mut points = Vec::new();
            let mut nz = nz;
            nz.sort_unstable();
            nz.dedup();
            let mut steps = steps;
            steps.sort_unstable();
            steps.dedup();
            if baseline {
                points.push(tiling.design(dims, Workload::Baseline, &platform)?);
            }
            for &z in &nz {
                for &n in &steps {
                    points.push(tiling.design(dims, Workload::Approx { nz: z, n_steps: n }, &platform)?);
                }
            }
            #[derive(Serialize)]
            struct Ceiling {
                t_r: usize,
                t_c: usize,
                peak_gops: f64,
                ridge_ctc: f64,
            }
            #[derive(Serialize)]
            struct Report<'a> {
                platform: &'a PlatformModel,
                bandwidth_gbps: f64,
                ceilings: Vec<Ceiling>,
                points: &'a [DesignPoint],
            }
            let mut ceilings: Vec<Ceiling> = Vec::new();
            for p in &points {
                if !ceilings.iter().any(|c| (c.t_r, c.t_c) == (p.t_r, p.t_c)) {
                    ceilings.push(Ceiling {
                        t_r: p.t_r,
                        t_c: p.t_c,
                        peak_gops: p.peak_gops,
                        ridge_ctc: platform.ridge_point(p.t_r, p.t_c),
                    });
                }
            }
            let report = Report {
                platform: &platform,
                bandwidth_gbps: platform.mem_bandwidth / 1e9,
                ceilings,
                points: &points,
            };
            write_file(&out, &to_json(&report)?)?;
            let mut w = csv_writer();
            w.write_record(["mode", "nz", "n_steps", "t_r", "t_c", "ctc", "attainable_gops", "bound", "modeled_latency"])
                .map_err(csv_err)?;
            for p in &points {
                let mode = match p.workload {
                    Workload::Baseline => "baseline",
                    Workload::Approx { .. } => "approx",
                };
                w.write_record([
                    mode.to_string(),
                    p.nz.to_string(),
                    p.n_steps.to_string(),
                    p.t_r.to_string(),
                    p.t_c.to_string(),
                    p.ctc.to_string(),
                    p.attainable_gops.to_string(),
                    p.bound.to_string(),
                    p.modeled_latency.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let csv = finish_csv(w)?;
            stdout.write_all(&csv).ok();
        }
    }
    Ok(())
}
