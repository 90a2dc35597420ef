use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use chronofill::config::ExperimentConfig;
use chronofill::container;
use chronofill::evaluation::{
    acquisition_meta, densify, evaluate_model, evaluate_split, export_attention, BandMetrics, CalibrationAccumulator,
    SplitEvaluation, Stratum,
};
use chronofill::laplace_head::nll_laplace;
use chronofill::model::Ablation;
use chronofill::nn::Tensor;
use chronofill::synthscene::{make_dataset, read_sample, Dataset, MultimodalSample, SampleMeta, Split};
use chronofill::training::{score, train, Checkpoint, EpochStats};
use chronofill::{CalendarDate, Error};

#[derive(Parser)]
#[command(name = "chronofill", version, about = "Target-date conditioned generation of optical patches from optical and radar series")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Require bit-reproducible outputs (every command already is).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth,
    /// Train a model.
    Train(TrainArgs),
    /// Predict one sample at a target date.
    Predict(PredictArgs),
    /// Reconstruct a dense NDVI series for one scene.
    Densify(DensifyArgs),
    /// Metrics of a model (or stored predictions) and of the linear baseline on the test split.
    Eval(EvalArgs),
    /// Interval calibration on the test split.
    Calib(CheckpointArg),
    /// Export attention maps for one sample.
    Attn(AttnArgs),
    /// Train ablated variants and compare them with the full model.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblationArg {
    #[value(alias = "optical-only")]
    OpticalOnly,
    #[value(alias = "absolute-time")]
    AbsoluteTime,
}

impl AblationArg {
    fn ablation(self) -> Ablation {
        match self {
            AblationArg::OpticalOnly => Ablation {
                optical_only: true,
                absolute_time: false,
            },
            AblationArg::AbsoluteTime => Ablation {
                optical_only: false,
                absolute_time: true,
            },
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Train an ablated variant instead of the full model.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Defaults to the checkpoint in the configured run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Sample directory, or a test sample id.
    #[arg(long)]
    sample: String,
    /// Defaults to the sample's own target date.
    #[arg(long)]
    target_date: Option<CalendarDate>,
}

#[derive(Args)]
struct DensifyArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Scene of this sample (directory or test id); defaults to the first test sample.
    #[arg(long)]
    sample: Option<String>,
    /// Grid spacing; overrides the configuration.
    #[arg(long)]
    step_days: Option<i64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Directory of stored predictions, `<id>/mu.mdar` per test sample.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[command(flatten)]
    ck: CheckpointArg,
    /// Sample directory or test id; defaults to the first test sample.
    #[arg(long)]
    sample: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// Compare only this variant with the full model.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

const SNAPSHOT: &str = "config.resolved.toml";
const LOCK: &str = ".lock";

/// Output directory held for the duration of a command.
struct RunDir {
    path: PathBuf,
    _lock: File,
}

impl RunDir {
    fn open(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock_path = path.join(LOCK);
        let lock = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Locked(path.to_path_buf()),
                _ => Error::io(&lock_path, e),
            })?;
        let dir = Self {
            path: path.to_path_buf(),
            _lock: lock,
        };
        dir.write(SNAPSHOT, cfg.to_toml().as_bytes())?;
        Ok(dir)
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn array(&self, name: &str, t: &Tensor) -> Result<()> {
        Ok(container::write(&self.join(name), t)?)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK));
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
}

impl Ctx {
    fn run_dir(&self, default: PathBuf) -> Result<RunDir> {
        RunDir::open(self.out.as_deref().unwrap_or(&default), &self.cfg)
    }

    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.cfg.paths.data_dir.clone())
    }

    fn dataset(&self) -> Result<Dataset> {
        Ok(Dataset::open(&self.data_dir())?)
    }

    fn checkpoint(&self, arg: &CheckpointArg) -> Result<Checkpoint> {
        let p = arg.checkpoint.clone().unwrap_or_else(|| self.cfg.paths.run_dir.join("checkpoint.ckpt"));
        Ok(Checkpoint::load(&p)?)
    }

    fn sub_run(&self, name: &str) -> PathBuf {
        self.cfg.paths.run_dir.join(name)
    }

    /// A sample directory, a test-sample id, or the first test sample.
    fn sample_dir(&self, arg: Option<&str>) -> Result<PathBuf> {
        match arg {
            Some(s) if Path::new(s).is_dir() => Ok(PathBuf::from(s)),
            Some(id) => {
                let p = self.data_dir().join(Split::Test.name()).join(id);
                if p.is_dir() {
                    Ok(p)
                } else {
                    Err(Error::NotFound(p).into())
                }
            }
            None => self
                .dataset()?
                .sample_dirs(Split::Test)
                .into_iter()
                .next()
                .ok_or_else(|| Error::NoValidElements.into()),
        }
    }
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let dir = ctx.run_dir(ctx.data_dir())?;
    let m = make_dataset(&ctx.cfg.data, &ctx.cfg.train.selection, ctx.cfg.seed, &dir.path)?;
    let counts: Vec<String> = m.splits.iter().map(|(s, v)| format!("{} {}", s.name(), v.len())).collect();
    eprintln!("wrote {} samples ({}) to {}", m.n_samples, counts.join(", "), dir.path.display());
    Ok(())
}

fn train_into(ctx: &Ctx, dataset: &Dataset, ablation: Ablation, dir: &RunDir) -> Result<Checkpoint> {
    let mut tcfg = ctx.cfg.train.clone();
    tcfg.ablation = ablation;
    let mut history: Vec<EpochStats> = Vec::new();
    let ck = train(dataset, &ctx.cfg.model, &tcfg, Some(&dir.path), &mut |st| {
        eprintln!("{}", serde_json::to_string(st).unwrap_or_default());
        history.push(st.clone());
    })?;
    dir.json("history.json", &history)?;
    Ok(ck)
}

fn cmd_train(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let dataset = ctx.dataset()?;
    let dir = ctx.run_dir(ctx.cfg.paths.run_dir.clone())?;
    let ablation = args.ablation.map_or(ctx.cfg.train.ablation, AblationArg::ablation);
    train_into(ctx, &dataset, ablation, &dir)?;
    Ok(())
}

fn cmd_predict(ctx: &Ctx, args: &PredictArgs) -> Result<()> {
    let ck = ctx.checkpoint(&args.ck)?;
    let sample_dir = ctx.sample_dir(Some(&args.sample))?;
    let (sample, meta) = read_sample(&sample_dir)?;
    let target = args.target_date.unwrap_or(meta.target_date);
    let gen = ck.generator()?;
    let pred = gen.predict(&sample.input, target)?;
    let dir = ctx.run_dir(ctx.sub_run("predict"))?;
    let (h, w) = (sample.height(), sample.width());
    dir.array("mu.mdar", &pred.mu.clone().reshape(vec![4, h, w]))?;
    dir.array("scale.mdar", &pred.scale().reshape(vec![4, h, w]))?;
    let nll = (target == meta.target_date)
        .then(|| nll_laplace(&sample.target.clone().reshape(vec![1, 4, h, w]), &pred, &vec![true; h * w]))
        .transpose()?;
    dir.json(
        "prediction.json",
        &json!({
            "sample": sample_dir,
            "target_date": target,
            "inputs": acquisition_meta(&sample.input, ck.header.ablation.optical_only),
            "mean_scale": pred.scale().data().iter().map(|&v| v as f64).sum::<f64>() / pred.scale().len() as f64,
            "nll": nll,
        }),
    )?;
    Ok(())
}

fn cmd_densify(ctx: &Ctx, args: &DensifyArgs) -> Result<()> {
    let ck = ctx.checkpoint(&args.ck)?;
    let dataset = ctx.dataset()?;
    let (_, meta) = read_sample(&ctx.sample_dir(args.sample.as_deref())?)?;
    let spec = dataset.scene_of(&meta)?;
    let step = args.step_days.unwrap_or(ctx.cfg.eval.step_days);
    let start = CalendarDate::new(dataset.manifest.config.scene.year, 1)?;
    let gen = ck.generator()?;
    let d = densify(&gen, &spec, &ck.header.sar_stats, start, ctx.cfg.eval.period_days, step, ctx.cfg.eval.ndvi_level)?;
    let dir = ctx.run_dir(ctx.sub_run("densify"))?;
    let (n, h, w) = (d.dates.len(), spec.height, spec.width);
    let stack = |f: &dyn Fn(usize) -> Tensor| {
        let data: Vec<f32> = (0..n).flat_map(|i| f(i).data().to_vec()).collect();
        Tensor::new(vec![n, 4, h, w], data)
    };
    dir.array("mu.mdar", &stack(&|i| d.predictions[i].mu.clone()))?;
    dir.array("scale.mdar", &stack(&|i| d.predictions[i].scale()))?;
    dir.array("ndvi_pred.mdar", &d.ndvi_pred)?;
    dir.array("ndvi_lower.mdar", &d.ndvi_lower)?;
    dir.array("ndvi_upper.mdar", &d.ndvi_upper)?;
    dir.array("ndvi_truth.mdar", &d.ndvi_truth)?;
    dir.array("ndvi_phenology.mdar", &d.ndvi_phenology)?;
    dir.array("ndvi_baseline.mdar", &d.ndvi_baseline)?;
    dir.json(
        "ndvi_series.json",
        &json!({ "scene_seed": meta.scene_seed, "series": d.series, "windows": d.windows, "summary": d.summary() }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    split: SplitEvaluation,
    nll: Option<f64>,
}

fn cmd_eval(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let test = ctx.dataset()?.load_split(Split::Test)?;
    let far = ctx.cfg.eval.far_gap_days;
    let report = match &args.predictions {
        Some(pdir) => {
            let split = evaluate_split(&test, far, |i, _| {
                let p = pdir.join(format!("{:06}", test[i].1.index)).join("mu.mdar");
                Ok(container::read(&p)?)
            })?;
            EvalReport { split, nll: None }
        }
        None => {
            let gen = ctx.checkpoint(&args.ck)?.generator()?;
            let split = evaluate_model(&gen, &test, far)?;
            let nll = (!test.is_empty()).then(|| score(&gen, &test)).transpose()?.map(|s| s.0);
            EvalReport { split, nll }
        }
    };
    let dir = ctx.run_dir(ctx.sub_run("eval"))?;
    dir.json("report.json", &report)
}

fn cmd_calib(ctx: &Ctx, args: &CheckpointArg) -> Result<()> {
    let gen = ctx.checkpoint(args)?.generator()?;
    let test = ctx.dataset()?.load_split(Split::Test)?;
    let mut acc = CalibrationAccumulator::new(&ctx.cfg.eval.levels)?;
    for (s, _) in &test {
        let p = gen.predict(&s.input, s.target_date)?;
        acc.add(&p, &s.target, &vec![true; s.height() * s.width()])?;
    }
    let curve = acc.finish()?;
    let dir = ctx.run_dir(ctx.sub_run("calib"))?;
    dir.json("calibration.json", &json!({ "curve": curve, "max_abs_error": curve.max_abs_error() }))
}

fn cmd_attn(ctx: &Ctx, args: &AttnArgs) -> Result<()> {
    let ck = ctx.checkpoint(&args.ck)?;
    let (sample, meta): (MultimodalSample, SampleMeta) = read_sample(&ctx.sample_dir(args.sample.as_deref())?)?;
    let gen = ck.generator()?;
    let (_, record) = gen.predict_with_attention(&sample.input, sample.target_date)?;
    let dir = ctx.run_dir(ctx.sub_run("attn"))?;
    let acq = acquisition_meta(&sample.input, ck.header.ablation.optical_only);
    let grid = (sample.height() / 2, sample.width() / 2);
    let report = export_attention(&record, &acq, grid, &dir.path)?;
    dir.json(
        "attention_summary.json",
        &json!({
            "sample": meta.index,
            "target_date": meta.target_date,
            "cloud_fractions": sample.cloud_fractions(),
            "mean_per_acquisition": report.mean_per_acquisition,
        }),
    )
}

#[derive(Serialize)]
struct ComparisonRow {
    variant: String,
    all: Option<BandMetrics>,
    dynamic_crop: Option<BandMetrics>,
    far_gap_samples: usize,
    far_gap: Option<BandMetrics>,
    test_nll: Option<f64>,
}

fn cmd_ablate(ctx: &Ctx, args: &AblateArgs) -> Result<()> {
    let dataset = ctx.dataset()?;
    let test = dataset.load_split(Split::Test)?;
    let dir = ctx.run_dir(ctx.sub_run("ablate"))?;
    let variants: Vec<Ablation> = match args.ablation {
        Some(a) => vec![Ablation::default(), a.ablation()],
        None => vec![
            Ablation::default(),
            AblationArg::OpticalOnly.ablation(),
            AblationArg::AbsoluteTime.ablation(),
        ],
    };
    let mut rows = Vec::new();
    for ab in variants {
        let sub = RunDir::open(&dir.join(ab.name()), &ctx.cfg)?;
        let gen = train_into(ctx, &dataset, ab, &sub)?.generator()?;
        let ev = evaluate_model(&gen, &test, ctx.cfg.eval.far_gap_days)?;
        let overall = |s: Stratum| ev.model.get(s).map(|m| m.overall.clone());
        rows.push(ComparisonRow {
            variant: ab.name().to_string(),
            all: overall(Stratum::All),
            dynamic_crop: overall(Stratum::DynamicCrop),
            far_gap_samples: ev.far_gap.samples,
            far_gap: ev.far_gap.model.as_ref().map(|m| m.overall.clone()),
            test_nll: (!test.is_empty()).then(|| score(&gen, &test)).transpose()?.map(|s| s.0),
        });
    }
    dir.json(
        "comparison.json",
        &json!({ "far_gap_days": ctx.cfg.eval.far_gap_days, "test_samples": test.len(), "variants": rows }),
    )
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::from_env(cli.config.as_deref()).context("loading configuration")?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    // Every command runs single-threaded with seeded RNGs, so the flag only documents intent.
    let _ = cli.deterministic;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        data: cli.data,
    };
    match &cli.command {
        Command::Synth => cmd_synth(&ctx),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Densify(a) => cmd_densify(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Calib(a) => cmd_calib(&ctx, a),
        Command::Attn(a) => cmd_attn(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
    }
}

fn report(kind: &str, path: Option<&Path>, message: &str) {
    let line = json!({ "error": kind, "path": path, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            report("usage", None, first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let lib = e.chain().find_map(|c| c.downcast_ref::<Error>());
            let message = format!("{e:#}").replace('\n', " ");
            report(lib.map_or("error", Error::kind), lib.and_then(Error::path), &message);
            ExitCode::FAILURE
        }
    }
}
