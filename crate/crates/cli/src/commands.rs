//! Subcommand definitions and their implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use grkan::checkpoint;
use grkan::flops::{self, LayerVariant};
use grkan::gradcheck::{self, GradcheckPlan};
use grkan::initfit::{
    cached_fit, depth_variance_probe, estimate_gain, fit_rational, kan_default_variance,
    ActivationTarget, FitOptions, GainOptions, GainSource, Sampling,
};
use grkan::model::{evaluate, train, KatModel};
use grkan::{KatModel64, RationalCoeffs, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::bench::{self, BenchPlan};
use crate::config::{DataShape, Precision, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "grkan",
    version,
    about = "Group-rational KAN layers: fitting, checks, benchmarks and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a safe Padé rational to a reference activation.
    Fit(FitArgs),
    /// Estimate the variance gain 1/E[F(x)²] under x ~ N(0,1).
    Gain(GainArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Track activation variance through a deep GR-KAN stack.
    Varcheck(VarcheckArgs),
    /// Count parameters and FLOPs of one layer.
    Flops(FlopsArgs),
    /// Time the looped, vectorized and fused activation kernels.
    Bench(BenchArgs),
    /// Train a model described by a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the dataset of a run config.
    Eval(EvalArgs),
    /// Convert an MLP-mixer checkpoint into a GR-KAN one.
    Transfer(TransferArgs),
    /// Sample every rational function in a checkpoint on a grid.
    Dumpfn(DumpfnArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub target: ActivationTarget,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    #[arg(long, default_value_t = 16)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Fail when the max abs residual on the grid exceeds this.
    #[arg(long, default_value_t = 0.1)]
    pub limit: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SamplingArg {
    Stratified,
    Iid,
}

#[derive(Debug, Args)]
pub struct GainArgs {
    #[arg(long, conflicts_with = "coeffs", required_unless_present = "coeffs")]
    pub target: Option<ActivationTarget>,
    /// JSON file with `numerator` and `denominator` arrays, or the output of `fit`.
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    #[arg(long, default_value_t = 4_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SamplingArg::Stratified)]
    pub sampling: SamplingArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random scalar rationals to check.
    #[arg(long)]
    pub rational: Option<usize>,
    /// Cases per tape primitive.
    #[arg(long)]
    pub per_primitive: Option<usize>,
    /// Random GR-KAN layers.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Random small models.
    #[arg(long)]
    pub model: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VarcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub depth: usize,
    /// Layer width; a preset supplies its model width instead.
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long)]
    pub preset: Option<grkan::model::Preset>,
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Activation the rational is fitted to.
    #[arg(long, default_value = "silu")]
    pub target: ActivationTarget,
    /// Independent stacks averaged per depth.
    #[arg(long, default_value_t = 8)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4_000_000)]
    pub samples: usize,
    /// Per-layer variance CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON; stderr when absent.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FlopsVariant {
    /// The per-function comparison: B-spline edge, rational, Horner rational.
    Table,
    Rational,
    Mlp,
    Kan,
    Grkan,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, value_enum, default_value_t = FlopsVariant::Table)]
    pub variant: FlopsVariant,
    #[arg(long, default_value_t = 768)]
    pub d_in: usize,
    #[arg(long, default_value_t = 3072)]
    pub d_out: usize,
    #[arg(long, default_value_t = 5)]
    pub m: u64,
    #[arg(long, default_value_t = 4)]
    pub n: u64,
    #[arg(long, default_value_t = 8)]
    pub groups: u64,
    /// B-spline grid size.
    #[arg(long, default_value_t = 3)]
    pub grid: u64,
    /// B-spline order.
    #[arg(long, default_value_t = 3)]
    pub order: u64,
    /// FLOPs charged per call of a fixed activation.
    #[arg(long, default_value_t = 1)]
    pub func_flops: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub groups: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "512")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1000)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, env = "GRKN_THREADS", default_value_t = 4)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `[output] dir`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Activation of the source MLP; must match the checkpoint.
    #[arg(long)]
    pub act: Option<ActivationTarget>,
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Where the GR-KAN checkpoint goes.
    #[arg(long)]
    pub out: PathBuf,
    /// Seeded probe inputs for the deviation report.
    #[arg(long, default_value_t = 1000)]
    pub probe: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpfnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes `text` to `path`, or to `stdout` when there is none.
fn emit(path: Option<&Path>, text: &str, stdout: &mut (dyn Write + Send)) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

fn to_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json output");
    s.push('\n');
    s
}

pub fn execute(
    cli: Cli,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<()> {
    match cli.command {
        Command::Fit(a) => fit(a, stdout),
        Command::Gain(a) => gain(a, stdout),
        Command::Gradcheck(a) => run_gradcheck(a, stdout),
        Command::Varcheck(a) => varcheck(a, stdout, stderr),
        Command::Flops(a) => flops_cmd(a, stdout),
        Command::Bench(a) => bench_cmd(a, stdout),
        Command::Train(a) => train_cmd(a, stdout),
        Command::Eval(a) => eval_cmd(a, stdout),
        Command::Transfer(a) => transfer(a, stdout),
        Command::Dumpfn(a) => dumpfn(a, stdout),
    }
}

fn fit(a: FitArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let opts = FitOptions {
        m: a.m,
        n: a.n,
        lo: a.lo,
        hi: a.hi,
        npoints: a.points,
        restarts: a.restarts,
        seed: a.seed,
        max_iters: a.max_iters,
        max_abs_err_limit: a.limit,
    };
    let r = fit_rational(a.target, &opts)?;
    let out = json!({
        "target": r.target,
        "m": a.m,
        "n": a.n,
        "numerator": r.coeffs.numerator(),
        "denominator": r.coeffs.denominator(),
        "max_abs_err": r.max_abs_err,
        "rss": r.rss,
        "restart": r.restart,
        "iterations": r.trace.len().saturating_sub(1),
        "options": opts,
    });
    emit(a.out.as_deref(), &to_json(&out), stdout)
}

/// Reads `{numerator, denominator}` from a coefficient or `fit` output file.
pub fn read_coeffs(path: &Path) -> Result<RationalCoeffs<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let v = v.get("coeffs").unwrap_or(&v);
    let list = |key: &str| -> Result<Vec<f64>> {
        v.get(key)
            .and_then(|a| a.as_array())
            .ok_or_else(|| CliError::Format(format!("{}: missing '{key}' array", path.display())))?
            .iter()
            .map(|x| {
                x.as_f64().ok_or_else(|| {
                    CliError::Format(format!("{}: '{key}' holds a non-number", path.display()))
                })
            })
            .collect()
    };
    Ok(RationalCoeffs::new(
        list("numerator")?,
        list("denominator")?,
    )?)
}

fn gain(a: GainArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let opts = GainOptions {
        nsamples: a.samples,
        seed: a.seed,
        sampling: match a.sampling {
            SamplingArg::Stratified => Sampling::Stratified,
            SamplingArg::Iid => Sampling::Iid,
        },
    };
    let (source_name, est) = match (&a.target, &a.coeffs) {
        (Some(t), _) => (
            t.name().to_string(),
            estimate_gain(GainSource::Target(*t), &opts)?,
        ),
        (None, Some(p)) => {
            let c = read_coeffs(p)?;
            (
                p.display().to_string(),
                estimate_gain(GainSource::Rational(&c), &opts)?,
            )
        }
        (None, None) => return Err(CliError::Usage("give --target or --coeffs".into())),
    };
    let out = json!({
        "source": source_name,
        "alpha": est.alpha,
        "stderr": est.stderr,
        "mean_sq": est.mean_sq,
        "mean_sq_stderr": est.mean_sq_stderr,
        "samples": opts.nsamples,
        "seed": opts.seed,
        "display": format!("{:.4} ± {:.4}", est.alpha, est.stderr),
    });
    emit(a.out.as_deref(), &to_json(&out), stdout)
}

fn run_gradcheck(a: GradcheckArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let d = GradcheckPlan::default();
    let plan = GradcheckPlan {
        rational: a.rational.unwrap_or(d.rational),
        per_primitive: a.per_primitive.unwrap_or(d.per_primitive),
        layer: a.layer.unwrap_or(d.layer),
        model: a.model.unwrap_or(d.model),
    };
    let report = gradcheck::run(a.seed, &plan)?;
    let out = json!({
        "passed": report.passed(),
        "seed": report.seed,
        "tolerance": report.tolerance,
        "cases": report.cases(),
        "coords": report.coords(),
        "skipped": report.skipped(),
        "max_rel_err": report.max_rel_err(),
        "checks": report.outcomes.iter().map(|o| json!({
            "name": o.name,
            "passed": o.passed(),
            "cases": o.cases,
            "coords": o.coords,
            "failures": o.failures,
            "skipped": o.skipped,
            "max_rel_err": o.max_rel_err,
        })).collect::<Vec<_>>(),
    });
    emit(a.out.as_deref(), &to_json(&out), stdout)?;
    if !report.passed() {
        let bad: Vec<&str> = report
            .outcomes
            .iter()
            .filter(|o| !o.passed())
            .map(|o| o.name.as_str())
            .collect();
        return Err(CliError::Check(format!(
            "gradient check failed for {}",
            bad.join(", ")
        )));
    }
    Ok(())
}

/// Band the per-depth mean variance has to stay in.
pub const VARIANCE_BAND: (f64, f64) = (0.5, 2.0);

fn varcheck(
    a: VarcheckArgs,
    stdout: &mut (dyn Write + Send),
    stderr: &mut (dyn Write + Send),
) -> Result<()> {
    let (dim, groups, m, n) = match a.preset {
        Some(p) => {
            let c = p.config();
            (c.dim, c.groups, c.m, c.n)
        }
        None => (a.dim, a.groups, 5, 4),
    };
    if a.depth == 0 || a.seeds == 0 {
        return Err(CliError::Usage("depth and seeds must be positive".into()));
    }
    let opts = GainOptions {
        nsamples: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let kan = kan_default_variance(1.0, &opts)?;
    let fit = cached_fit(a.target, m, n)?;
    let alpha = estimate_gain(GainSource::Rational(&fit.coeffs), &opts)?.alpha;

    let trajectory = |alpha: f64| -> Result<Vec<Vec<f64>>> {
        (0..a.seeds)
            .map(|s| {
                Ok(depth_variance_probe(
                    &fit.coeffs,
                    alpha,
                    a.depth,
                    dim,
                    a.batch,
                    groups,
                    a.seed + s,
                )?
                .variances)
            })
            .collect()
    };
    let runs = [
        ("gain", alpha, trajectory(alpha)?),
        ("unit", 1.0, trajectory(1.0)?),
    ];

    let mut csv = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Format(e.to_string());
    csv.write_record(["init", "alpha", "seed", "depth", "variance"])
        .map_err(io)?;
    let mut means = Vec::new();
    for (name, alpha, per_seed) in &runs {
        let mut mean = vec![0.0; a.depth];
        for (s, vars) in per_seed.iter().enumerate() {
            for (l, v) in vars.iter().enumerate() {
                mean[l] += v / a.seeds as f64;
                csv.write_record([
                    name.to_string(),
                    alpha.to_string(),
                    (a.seed + s as u64).to_string(),
                    (l + 1).to_string(),
                    v.to_string(),
                ])
                .map_err(io)?;
            }
        }
        for (l, v) in mean.iter().enumerate() {
            csv.write_record([
                name.to_string(),
                alpha.to_string(),
                "mean".into(),
                (l + 1).to_string(),
                v.to_string(),
            ])
            .map_err(io)?;
        }
        means.push(mean);
    }
    let text = String::from_utf8(
        csv.into_inner()
            .map_err(|e| CliError::Format(e.to_string()))?,
    )
    .expect("utf-8 csv");
    emit(a.out.as_deref(), &text, stdout)?;

    let (lo, hi) = VARIANCE_BAND;
    let inside = |v: &f64| (lo..=hi).contains(v);
    let gain_in_band = means[0].iter().all(inside);
    let control_leaves = !inside(means[1].last().expect("depth ≥ 1"));
    let summary = json!({
        "target": a.target.name(),
        "dim": dim,
        "groups": groups,
        "depth": a.depth,
        "batch": a.batch,
        "seeds": a.seeds,
        "alpha": alpha,
        "band": [lo, hi],
        "gain_mean_variance": means[0],
        "unit_mean_variance": means[1],
        "gain_in_band": gain_in_band,
        "unit_leaves_band": control_leaves,
        "kan_default": kan,
        "passed": gain_in_band && control_leaves,
    });
    let summary_text = to_json(&summary);
    match &a.summary {
        Some(p) => std::fs::write(p, &summary_text).map_err(|e| CliError::io(p, e))?,
        None => stderr
            .write_all(summary_text.as_bytes())
            .map_err(|e| CliError::io("<stderr>", e))?,
    }
    if !(gain_in_band && control_leaves) {
        return Err(CliError::Check(format!(
            "gain-scaled stack in band: {gain_in_band}, unit-gain control leaves band: {control_leaves}"
        )));
    }
    Ok(())
}

fn flops_cmd(a: FlopsArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let out = match a.variant {
        FlopsVariant::Table => {
            let plain = flops::rational_flops_plain(a.m, a.n);
            let horner = flops::rational_flops_horner(a.m, a.n);
            json!({
                "b_spline": {
                    "grid": a.grid,
                    "order": a.order,
                    "flops": flops::kan_edge_flops(a.grid, a.order),
                },
                "rational": { "m": a.m, "n": a.n, "flops": plain.total(), "breakdown": plain },
                "rational_horner": { "m": a.m, "n": a.n, "flops": horner.total(), "breakdown": horner },
                "instrumented": {
                    "rational": flops::instrumented_plain(a.m as usize, a.n as usize).total(),
                    "rational_horner": flops::instrumented_horner(a.m as usize, a.n as usize).total(),
                },
            })
        }
        FlopsVariant::Rational => {
            let plain = flops::rational_flops_plain(a.m, a.n);
            let horner = flops::rational_flops_horner(a.m, a.n);
            json!({
                "m": a.m,
                "n": a.n,
                "plain": { "flops": plain.total(), "breakdown": plain },
                "horner": { "flops": horner.total(), "breakdown": horner },
            })
        }
        FlopsVariant::Mlp => serde_json::to_value(flops::audit_layer(
            a.d_in,
            a.d_out,
            LayerVariant::Mlp {
                func_flops: a.func_flops,
            },
        )?)
        .expect("json"),
        FlopsVariant::Kan => serde_json::to_value(flops::audit_layer(
            a.d_in,
            a.d_out,
            LayerVariant::Kan {
                grid: a.grid,
                order: a.order,
                func_flops: a.func_flops,
            },
        )?)
        .expect("json"),
        FlopsVariant::Grkan => serde_json::to_value(flops::audit_layer(
            a.d_in,
            a.d_out,
            LayerVariant::GrKan {
                m: a.m,
                n: a.n,
                groups: a.groups,
            },
        )?)
        .expect("json"),
    };
    emit(a.out.as_deref(), &to_json(&out), stdout)
}

fn bench_cmd(a: BenchArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    if a.threads == 0 {
        return Err(CliError::Usage("threads must be positive".into()));
    }
    let plan = BenchPlan {
        groups: a.groups,
        dims: a.dims,
        batch: a.batch,
        tokens: a.tokens,
        repeats: a.repeats,
        seed: a.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let result = pool.install(|| {
        bench::run(&plan, |row| {
            csv.serialize(row)
                .map_err(|e| CliError::Format(e.to_string()))
        })
    });
    // Rows are written even when the checksums disagree.
    let text = String::from_utf8(
        csv.into_inner()
            .map_err(|e| CliError::Format(e.to_string()))?,
    )
    .expect("utf-8 csv");
    emit(a.out.as_deref(), &text, stdout)?;
    result.map(|_| ())
}

/// Directory of `path`, for resolving paths written relative to a config.
fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_run(path: &Path) -> Result<(String, RunConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg = RunConfig::from_toml(&text)?;
    Ok((text, cfg))
}

fn train_cmd(a: TrainArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let (text, first) = load_run(&a.config)?;
    match first.precision {
        Precision::F32 => train_typed::<f32>(&a, &text, &first, stdout),
        Precision::F64 => train_typed::<f64>(&a, &text, &first, stdout),
    }
}

fn train_typed<T: Scalar>(
    a: &TrainArgs,
    text: &str,
    first: &RunConfig,
    stdout: &mut (dyn Write + Send),
) -> Result<()> {
    let data = first.dataset.load::<T>(first.seed, &base_dir(&a.config))?;
    let shape = DataShape::of(&data);
    let mut cfg = RunConfig::from_toml_for_data(text, shape)?;
    if let Some(dir) = &a.out_dir {
        cfg.output.dir = dir.clone();
    }
    cfg.check_data(shape)?;
    cfg.model.validate()?;

    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let effective = dir.join("effective_config.toml");
    std::fs::write(&effective, cfg.to_toml()).map_err(|e| CliError::io(&effective, e))?;

    let mut model = KatModel::<T>::build(&cfg.model, cfg.seed)?;
    let report = train(&mut model, &data, &cfg.optimizer)?;

    let trace = dir.join(&cfg.output.trace);
    std::fs::write(&trace, report.to_csv()).map_err(|e| CliError::io(&trace, e))?;
    let last = report.final_row();
    let summary = json!({
        "seed": cfg.seed,
        "precision": cfg.precision,
        "params": model.param_count(),
        "samples": data.len(),
        "steps": report.steps,
        "final_loss": last.loss,
        "final_accuracy": last.accuracy,
        "all_losses_finite": report.trace.iter().all(|r| r.loss.is_finite() && r.train_loss.is_none_or(f64::is_finite)),
    });
    let ckpt = dir.join(&cfg.output.checkpoint);
    checkpoint::save(&model, summary.clone(), &ckpt).map_err(|e| match e {
        grkan::Error::Io(io) => CliError::io(&ckpt, io),
        e => e.into(),
    })?;
    let summary_path = dir.join("summary.json");
    std::fs::write(&summary_path, to_json(&summary)).map_err(|e| CliError::io(&summary_path, e))?;
    emit(None, &to_json(&summary), stdout)
}

fn load_checkpoint(path: &Path) -> Result<KatModel64> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    Ok(checkpoint::load::<f64>(path)?.0)
}

fn eval_cmd(a: EvalArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let (_, cfg) = load_run(&a.config)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let data = cfg.dataset.load::<f64>(cfg.seed, &base_dir(&a.config))?;
    let shape = DataShape::of(&data);
    let mc = model.config();
    let want = DataShape {
        tokens: mc.tokens,
        features: mc.token_features,
        outputs: mc.outputs,
        task: mc.task,
    };
    if want != shape {
        return Err(CliError::Usage(format!(
            "checkpoint expects {want:?} but the dataset provides {shape:?}"
        )));
    }
    let r = evaluate(&model, &data)?;
    let out = json!({ "samples": data.len(), "loss": r.loss, "accuracy": r.accuracy });
    emit(a.out.as_deref(), &to_json(&out), stdout)
}

/// Pearson correlation of two equally long slices.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn transfer(a: TransferArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let src = load_checkpoint(&a.checkpoint)?;
    let cfg = src.config().clone();
    if let Some(act) = a.act {
        let stored = ActivationTarget::from(cfg.mlp_activation);
        if act != stored {
            return Err(CliError::Usage(format!(
                "checkpoint MLP uses {}, not {}",
                stored.name(),
                act.name()
            )));
        }
    }
    let dst = src.transfer_to_grkan(a.groups)?;
    if a.probe == 0 {
        return Err(CliError::Usage("probe must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = Tensor::<f64>::randn([a.probe, cfg.tokens, cfg.token_features], 1.0, &mut rng)?;
    let ys = src.forward_inference(&x)?;
    let yd = dst.forward_inference(&x)?;
    let max_dev = ys.max_abs_diff(&yd)?;
    let corr = correlation(ys.data(), yd.data());
    checkpoint::save(
        &dst,
        json!({ "transferred_from": a.checkpoint.display().to_string() }),
        &a.out,
    )
    .map_err(|e| match e {
        grkan::Error::Io(io) => CliError::io(&a.out, io),
        e => e.into(),
    })?;
    let out = json!({
        "source": a.checkpoint.display().to_string(),
        "out": a.out.display().to_string(),
        "activation": ActivationTarget::from(cfg.mlp_activation).name(),
        "groups": a.groups,
        "probe": a.probe,
        "seed": a.seed,
        "max_abs_deviation": max_dev,
        "correlation": corr,
    });
    emit(a.report.as_deref(), &to_json(&out), stdout)
}

fn dumpfn(a: DumpfnArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    if a.points < 2 || !(a.hi > a.lo) {
        return Err(CliError::Usage("need points ≥ 2 and hi > lo".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let rationals = model.rationals();
    if rationals.is_empty() {
        return Err(CliError::Usage(
            "checkpoint holds no rational functions (MLP mixers)".into(),
        ));
    }
    let step = (a.hi - a.lo) / (a.points - 1) as f64;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Format(e.to_string());
    csv.write_record(["rational", "group", "x", "y"])
        .map_err(io)?;
    for (name, act) in &rationals {
        for g in 0..act.groups() {
            let c = act.coeffs(g);
            for i in 0..a.points {
                let x = a.lo + step * i as f64;
                let y = c.eval_horner(x)?;
                csv.write_record([name.clone(), g.to_string(), x.to_string(), y.to_string()])
                    .map_err(io)?;
            }
        }
    }
    let text = String::from_utf8(
        csv.into_inner()
            .map_err(|e| CliError::Format(e.to_string()))?,
    )
    .expect("utf-8 csv");
    emit(a.out.as_deref(), &text, stdout)
}
