use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdsa_core::config::RunConfig;
use tdsa_core::datagen::{self, Dataset};
use tdsa_core::resample::UpsampleMethod;
use tdsa_core::selftest::{self, SelftestOptions, SuiteReport};
use tdsa_core::trainer::{self, EvalMetrics, TrainConfig};
use tdsa_core::{checkpoint, visualize, Error};

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "tdsa", version, about = "Train and inspect CNNs with a top-down spatial attention loss")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialization, batch order and masks.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    #[arg(long, global = true, value_name = "METHOD")]
    upsample: Option<UpsampleMethod>,
    /// Middle-level channels per class as a multiple of 3 (ξ_mult).
    #[arg(long, global = true, value_name = "N")]
    xi: Option<usize>,
    /// Weight of the attention loss; 0 trains the cross-entropy baseline.
    #[arg(long, global = true, value_name = "F")]
    mu: Option<f64>,
    /// Weight of the diversity component.
    #[arg(long, global = true, value_name = "F")]
    lambda: Option<f64>,
    /// Any config key, e.g. `--set epochs=5`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle-equivalence and invariant suites.
    Selftest {
        /// Negative control: flip the sign of the diversity term.
        #[arg(long, hide = true)]
        corrupt_lambda: bool,
    },
    /// Compare tape gradients with finite differences, backbone included.
    Gradcheck,
    /// Write the synthetic dataset as NetPBM files.
    GenData,
    /// Train a model and write metrics and a checkpoint.
    Train(DataArgs),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Export per-class channel heatmaps as PGM files.
    Visualize {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Class whose channel groups are exported.
        #[arg(long = "class", value_name = "ID")]
        class_id: usize,
        /// Number of test samples to export.
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Also write the upsampled float maps as `.t4` dumps.
        #[arg(long)]
        raw: bool,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with `train/` and `test/` class directories; the
    /// synthetic generator is used when absent.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

enum Failure {
    Check(String),
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

fn resolve(g: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    apply_flags(g, &mut cfg.train);
    Ok(cfg)
}

fn apply_flags(g: &Global, t: &mut TrainConfig) {
    if let Some(s) = g.seed {
        t.seed = s;
    }
    if let Some(m) = g.upsample {
        t.loss.upsample = m;
    }
    if let Some(x) = g.xi {
        t.backbone.xi_mult = x;
    }
    if let Some(m) = g.mu {
        t.loss.mu = m;
    }
    if let Some(l) = g.lambda {
        t.loss.lambda = l;
    }
}

fn out_dir(g: &Global) -> Result<&Path, Failure> {
    fs::create_dir_all(&g.out).map_err(|e| Error::Io {
        path: g.out.clone(),
        source: e,
    })?;
    Ok(&g.out)
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn reports_csv(reports: &[SuiteReport]) -> String {
    let mut s = String::from("suite,cases,worst,passed,detail\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{:e},{},\"{}\"\n",
            r.name,
            r.cases,
            r.worst,
            r.passed,
            r.detail.replace('"', "'")
        ));
    }
    s
}

fn finish_suites(reports: &[SuiteReport], out: &Path, file: &str) -> Outcome {
    print!("{}", selftest::render_table(reports));
    write(&out.join(file), &reports_csv(reports))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} suites passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("failing suites: {}", failed.join(", "))))
    }
}

/// Train and test splits, loaded from disk or generated.
fn datasets(cfg: &RunConfig, args: &DataArgs, size: usize) -> Result<(Dataset, Dataset), Failure> {
    match &args.data {
        Some(root) => Ok((
            datagen::load_dir(&root.join("train"), size)?,
            datagen::load_dir(&root.join("test"), size)?,
        )),
        None => {
            let mut spec = cfg.data.clone();
            spec.image_size = size;
            let d = datagen::generate(&spec)?;
            Ok((d.train, d.test))
        }
    }
}

fn eval_json(e: &EvalMetrics) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(e).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn print_eval(e: &EvalMetrics) {
    let c = e.containment.map(|c| format!("{c:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "samples {}  accuracy {:.4}  channel-alignment {:.4}  containment {c}",
        e.samples, e.accuracy, e.alignment_accuracy
    );
}

/// Loads a checkpoint and applies the loss-related flags on top of its
/// stored configuration.
fn load_model(dir: &Path, g: &Global) -> Result<(tdsa_core::backbone::ModelParams<f32>, TrainConfig), Failure> {
    if !dir.join(checkpoint::MANIFEST_FILE).is_file() {
        return Err(Failure::Usage(format!("no checkpoint at {}", dir.display())));
    }
    let (params, manifest) = checkpoint::load(dir)?;
    let mut cfg = manifest.config;
    if let Some(m) = g.upsample {
        cfg.loss.upsample = m;
    }
    Ok((params, cfg))
}

fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    let cfg = resolve(g)?;
    match &cli.command {
        Command::Selftest { corrupt_lambda } => {
            let opts = SelftestOptions {
                seed: cfg.train.seed,
                corrupt_lambda_sign: *corrupt_lambda,
            };
            let reports = selftest::run_all(&opts)?;
            finish_suites(&reports, out_dir(g)?, "selftest.csv")
        }
        Command::Gradcheck => {
            let opts = SelftestOptions {
                seed: cfg.train.seed,
                corrupt_lambda_sign: false,
            };
            let reports = vec![
                selftest::loss_gradcheck(&opts, 10)?,
                selftest::backbone_gradcheck(cfg.train.seed, &selftest::tiny_backbone(), &cfg.train.loss)?,
            ];
            finish_suites(&reports, out_dir(g)?, "gradcheck.csv")
        }
        Command::GenData => {
            cfg.data.validate()?;
            let data = datagen::generate(&cfg.data)?;
            let out = out_dir(g)?;
            datagen::write_dataset(&data, out)?;
            println!(
                "wrote {} train and {} test images to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            cfg.validate()?;
            let t = &cfg.train;
            let (train, test) = datasets(&cfg, args, t.backbone.input_h)?;
            if train.num_classes() != t.backbone.num_classes {
                return Err(Failure::Usage(format!(
                    "dataset has {} classes, configuration expects {}",
                    train.num_classes(),
                    t.backbone.num_classes
                )));
            }
            let (params, metrics) = trainer::train(&train, Some(&test), t, 0)?;
            let out = out_dir(g)?;
            write(&out.join("metrics.csv"), &metrics.to_csv())?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            let steps = t.epochs * train.len().div_ceil(t.batch_size);
            checkpoint::save(&out.join("checkpoint"), &params, t, steps, t.epochs)?;
            let eval = metrics.final_eval.unwrap_or_default();
            write(&out.join("eval.json"), &eval_json(&eval)?)?;
            print_eval(&eval);
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let (params, tcfg) = load_model(checkpoint, g)?;
            let (_, test) = datasets(&cfg, data, tcfg.backbone.input_h)?;
            let eval = trainer::evaluate(&params, &test, &tcfg)?;
            write(&out_dir(g)?.join("eval.json"), &eval_json(&eval)?)?;
            print_eval(&eval);
            Ok(())
        }
        Command::Visualize {
            checkpoint,
            class_id,
            limit,
            raw,
            data,
        } => {
            let (params, tcfg) = load_model(checkpoint, g)?;
            if *class_id >= tcfg.backbone.num_classes {
                return Err(Failure::Usage(format!(
                    "class {class_id} is out of range for {} classes",
                    tcfg.backbone.num_classes
                )));
            }
            let (_, test) = datasets(&cfg, data, tcfg.backbone.input_h)?;
            let records = visualize::export(&params, &tcfg, &test, *class_id, *limit, *raw, out_dir(g)?)?;
            println!("wrote {} heatmaps to {}", records.len(), g.out.display());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Images(_) => EXIT_IO,
        Error::Config(_) | Error::Contract { .. } | Error::Dimension { .. } | Error::Format { .. } | Error::Json(_) => {
            EXIT_USAGE
        }
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_CHECK,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
