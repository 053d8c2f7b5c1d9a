//! `sciflow` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including
//! missing input files), 3 numeric failure, 4 IO or format error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_kv, OptimizerKind, Precision, RunConfig, TrainVariant};
use crate::data::{ingest_dataset, Layout, SynthConfig};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::io::{flow_to_color, read_flo, read_kitti_png, read_png_rgb, write_flo, write_png_rgb};
use crate::loss::{confidence_map, ConfidenceSource, LossVariant};
use crate::metrics::{confidence_render, error_map, render_error_map, EvalAccumulator, EvalReport, OutlierRule};
use crate::model::{load_checkpoint, AnyModel, FlowModel};
use crate::tensor::Element;
use crate::train::{evaluate_index, evaluate_synthetic, format_ablation_table, run_ablation, train};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "SCIFLOW_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "sciflow", version, about = "Iterative optical flow with self-cleaning iterations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, metrics log and report.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or compare flow files directly.
    Eval(EvalArgs),
    /// Estimate flow for one image pair.
    Infer(InferArgs),
    /// Render a flow file, plus error and confidence maps when GT is given.
    Viz(VizArgs),
    /// Train the loss-variant and confidence-source grid and tabulate it.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// baseline, sci, rfl or sci_rfl.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// RFL weighting: a, b, c or d.
    #[arg(long = "loss-variant")]
    pub loss_variant: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// final_iteration, per_iteration or none.
    #[arg(long = "confidence-source")]
    pub confidence_source: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Dataset directory used instead of synthetic pairs.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// sintel_like, kitti_like or flo_pairs.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long = "output-dir")]
    pub output_dir: Option<PathBuf>,
    /// Run directory name under the output directory.
    #[arg(long = "run-name")]
    pub run_name: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Evaluated on `--dataset` if given, else on the held-out synthetic set.
    #[arg(long, conflicts_with = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Predicted flow file (.flo or KITTI .png), compared against --gt.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Outlier rule for Fl-all: kitti or 3px.
    #[arg(long, default_value = "kitti")]
    pub rule: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image1: PathBuf,
    #[arg(long)]
    pub image2: PathBuf,
    /// Directory receiving flow.flo and flow.png.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write one color PNG per refinement iteration.
    #[arg(long = "dump-iterations")]
    pub dump_iterations: bool,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Flow file (.flo or KITTI .png).
    pub flow: PathBuf,
    /// Ground truth; enables error and confidence maps.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Directory receiving the PNGs.
    #[arg(long)]
    pub output: PathBuf,
    /// Magnitude mapped to full saturation.
    #[arg(long = "max-magnitude")]
    pub max_magnitude: Option<f64>,
    /// Error mapped to white in the error map.
    #[arg(long = "max-error")]
    pub max_error: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Map an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Shape { .. } | Error::PaddingRequired { .. } => EXIT_USAGE,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        Error::Divergence(_) | Error::NonFinite { .. } | Error::NoValidPixels | Error::State(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Format(_) | Error::Length { .. } | Error::Layout { .. } => EXIT_IO,
    }
}

/// Parse arguments and run; returns the exit code. Errors go to stderr.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.run),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Viz(a) => cmd_viz(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Argument(m) => Error::Config(m),
        other => other,
    }
}

/// Merge defaults, config file, environment and flags, in that order.
pub fn resolve_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
    for s in &a.set {
        let pairs = parse_kv(s)?;
        cfg.apply(&pairs)?;
    }
    if let Some(v) = &a.variant {
        cfg.variant = v.parse::<TrainVariant>()?;
    }
    if let Some(v) = a.steps {
        cfg.optim.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.optim.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = &a.optimizer {
        cfg.optim.kind = v.parse::<OptimizerKind>()?;
    }
    if let Some(v) = &a.loss_variant {
        cfg.loss.variant = v.parse::<LossVariant>().map_err(config_err)?;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.gamma {
        cfg.loss.gamma = v;
    }
    if let Some(v) = &a.confidence_source {
        cfg.loss.confidence_source = v.parse::<ConfidenceSource>().map_err(config_err)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.precision {
        cfg.precision = v.parse::<Precision>()?;
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &a.layout {
        cfg.layout = v.parse::<Layout>().map_err(config_err)?;
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_dir(cfg: &RunConfig, name: String) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    create_dir(&dir)?;
    write_file(&dir.join("config.txt"), cfg.to_kv_text())?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("report.txt"), report.to_kv_lines())?;
    write_file(&dir.join("report.json"), report.to_json())
}

fn report_text(report: &EvalReport) -> String {
    format!("EPE {:.2}  Fl-all {:.2}%\n{}", report.epe_mean, report.fl_all, report.to_kv_lines())
}

/// Line-buffered log file that also echoes to stdout.
struct LogFile(std::io::BufWriter<std::fs::File>, PathBuf);

impl LogFile {
    fn create(path: PathBuf) -> Result<Self> {
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self(std::io::BufWriter::new(f), path))
    }

    fn line(&mut self, l: &str) -> Result<()> {
        println!("{l}");
        writeln!(self.0, "{l}").map_err(|e| Error::io(&self.1, e))
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush().map_err(|e| Error::io(&self.1, e))
    }
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = resolve_run_config(a)?;
    let name = a.run_name.clone().unwrap_or_else(|| format!("{}_seed{}", cfg.variant, cfg.seed));
    let dir = run_dir(&cfg, name)?;
    let mut log = LogFile::create(dir.join("metrics.log"))?;
    fn go<T: Element>(cfg: &RunConfig, dir: &Path, log: &mut LogFile) -> Result<EvalReport> {
        let r = train::<T>(cfg, &mut |l| log.line(l))?;
        r.model.save(dir.join("checkpoint.bin"))?;
        Ok(r.report)
    }
    let result = match cfg.precision {
        Precision::F32 => go::<f32>(&cfg, &dir, &mut log),
        Precision::F64 => go::<f64>(&cfg, &dir, &mut log),
    };
    log.finish()?;
    let report = result?;
    write_report(&dir, &report)?;
    println!("run directory: {}", dir.display());
    Ok(())
}

fn read_flow_file(path: &Path) -> Result<FlowField<f64>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "flo" => read_flo(path),
        "png" => read_kitti_png(path),
        _ => Err(Error::Argument(format!(
            "{}: unknown flow file extension (expected .flo or .png)",
            path.display()
        ))),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let rule: OutlierRule = a.rule.parse().map_err(config_err)?;
    let cfg = resolve_run_config(&a.run)?;
    let report = if let Some(pred) = &a.pred {
        let gt = a.gt.as_ref().expect("clap requires --gt with --pred");
        let mut acc = EvalAccumulator::new(rule);
        acc.add(&read_flow_file(pred)?, &read_flow_file(gt)?)?;
        acc.report()?
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Argument("eval needs --checkpoint or --pred/--gt".into()))?;
        let dataset = match &cfg.dataset {
            Some(root) => Some(ingest_dataset(root, cfg.layout)?),
            None => None,
        };
        let eval_data = cfg.eval_data();
        fn go<T: Element>(
            m: &FlowModel<T>,
            dataset: Option<&crate::data::SampleIndex>,
            data: &SynthConfig,
            batch: usize,
            rule: OutlierRule,
        ) -> Result<EvalReport> {
            match dataset {
                Some(index) => evaluate_index(m, index, rule),
                None if rule == OutlierRule::Kitti => evaluate_synthetic(m, data, batch),
                None => Err(Error::Argument("synthetic evaluation uses the kitti outlier rule".into())),
            }
        }
        match load_checkpoint(ckpt)? {
            AnyModel::F32(m) => go(&m, dataset.as_ref(), &eval_data, cfg.optim.batch, rule)?,
            AnyModel::F64(m) => go(&m, dataset.as_ref(), &eval_data, cfg.optim.batch, rule)?,
        }
    };
    let text = report_text(&report);
    print!("{text}");
    if a.run.output_dir.is_some() || a.run.run_name.is_some() || std::env::var_os(OUTPUT_DIR_ENV).is_some() {
        let dir = run_dir(&cfg, a.run.run_name.clone().unwrap_or_else(|| "eval".into()))?;
        write_file(&dir.join("metrics.log"), text)?;
        write_report(&dir, &report)?;
    }
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let i1 = read_png_rgb(&a.image1)?;
    let i2 = read_png_rgb(&a.image2)?;
    if (i1.width, i1.height) != (i2.width, i2.height) {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            i1.width, i1.height, i2.width, i2.height
        )));
    }
    fn go<T: Element>(
        m: &FlowModel<T>,
        i1: &crate::io::RgbImage,
        i2: &crate::io::RgbImage,
    ) -> Result<Vec<FlowField<f64>>> {
        let trace = m.estimate_flow(&i1.to_tensor(), &i2.to_tensor())?;
        Ok(trace.flows.iter().map(|f| f.cast::<f64>()).collect())
    }
    let flows = match load_checkpoint(&a.checkpoint)? {
        AnyModel::F32(m) => go(&m, &i1, &i2)?,
        AnyModel::F64(m) => go(&m, &i1, &i2)?,
    };
    create_dir(&a.output)?;
    let last = flows.last().expect("at least one iteration");
    write_flo(a.output.join("flow.flo"), last)?;
    write_png_rgb(a.output.join("flow.png"), &flow_to_color(last, None))?;
    if a.dump_iterations {
        let max = flows
            .iter()
            .flat_map(|f| {
                let d = f.tensor().data();
                let plane = d.len() / 2;
                (0..plane).map(move |k| d[k].hypot(d[plane + k]))
            })
            .fold(0.0, f64::max);
        for (i, f) in flows.iter().enumerate() {
            write_png_rgb(a.output.join(format!("iter_{:02}.png", i + 1)), &flow_to_color(f, Some(max)))?;
        }
    }
    println!("wrote {}", a.output.join("flow.flo").display());
    Ok(())
}

fn cmd_viz(a: &VizArgs) -> Result<()> {
    let flow = read_flow_file(&a.flow)?;
    create_dir(&a.output)?;
    write_png_rgb(a.output.join("flow.png"), &flow_to_color(&flow, a.max_magnitude))?;
    if let Some(gt_path) = &a.gt {
        let gt = read_flow_file(gt_path)?;
        let err = error_map(&flow, &gt)?;
        write_png_rgb(a.output.join("error.png"), &render_error_map(&err, a.max_error)?)?;
        let conf = confidence_map(&gt, &flow)?;
        write_png_rgb(a.output.join("confidence.png"), &confidence_render(&conf)?)?;
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_run_config(&a.run)?;
    let dir = run_dir(&cfg, a.run.run_name.clone().unwrap_or_else(|| "ablation".into()))?;
    let mut log = LogFile::create(dir.join("ablation.log"))?;
    let rows = match cfg.precision {
        Precision::F32 => run_ablation::<f32>(&cfg, &a.seeds, &mut |l| log.line(l)),
        Precision::F64 => run_ablation::<f64>(&cfg, &a.seeds, &mut |l| log.line(l)),
    };
    log.finish()?;
    let rows = rows?;
    let table = format_ablation_table(&rows, &a.seeds);
    print!("{table}");
    write_file(&dir.join("ablation.txt"), &table)?;
    let json: Vec<_> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "row": r.label,
                "variant": r.variant.to_string(),
                "loss_variant": r.loss_variant.to_string(),
                "confidence_source": r.confidence_source.to_string(),
                "seeds": a.seeds,
                "epe": r.epe,
                "fl_all": r.fl_all,
                "epe_mean": r.mean_epe(),
                "fl_all_mean": r.mean_fl_all(),
            })
        })
        .collect();
    write_file(
        &dir.join("ablation.json"),
        serde_json::to_string_pretty(&json).expect("ablation rows serialize"),
    )
}
