use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grumo::augment::Augmentation;
use grumo::error::{Error, Result};
use grumo::io;
use grumo::metrics::{DEFAULT_BINS, DEFAULT_STEPS};
use grumo::model::ModelConfig;
use grumo::model_io::{load_model, save_model};
use grumo::pipeline::{self, GradOverrides, Method};
use grumo::synth::{SceneParams, SceneSet, Split, DEFAULT_SIZE};
use grumo::train::{self, TrainOptions};
use grumo::uncertainty::Fusion;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

/// Post-hoc gradient-based uncertainty for depth models, with its evaluation harness.
#[derive(Parser)]
#[command(name = "grumo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene set.
    GenData(GenData),
    /// Train the fixture depth model.
    Train(Train),
    /// Write depth and uncertainty for every scene.
    Estimate(Estimate),
    /// Score prediction directories against ground truth.
    Evaluate(Evaluate),
    /// Estimate and evaluate several methods into one table.
    Compare(Compare),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    /// Image height and width.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    dmin: f64,
    #[arg(long, default_value_t = 10.0)]
    dmax: f64,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Replace an existing scene set in --out.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Add the variance head and train with the Gaussian likelihood.
    #[arg(long)]
    predictive: bool,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainOptions::default().batch_size)]
    batch_size: usize,
    /// Scenes of the companion test split used to score the trained model
    /// (defaults to the training count).
    #[arg(long)]
    test_count: Option<usize>,
}

#[derive(Args)]
struct MethodFlags {
    /// Override the augmentation of the gradient methods.
    #[arg(long)]
    aug: Option<Augmentation>,
    /// Variance weight for predictive models.
    #[arg(long = "lambda")]
    lambda: Option<f64>,
    /// Single decoder layer (1-based).
    #[arg(long, conflicts_with = "layers")]
    layer: Option<usize>,
    /// Comma-separated decoder layers to fuse.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    fusion: Option<Fusion>,
}

impl MethodFlags {
    fn overrides(&self) -> GradOverrides {
        GradOverrides {
            aug: self.aug.clone(),
            layer: self.layer,
            layers: self.layers.clone(),
            fusion: self.fusion,
            lambda: self.lambda,
        }
    }
}

#[derive(Args)]
struct Estimate {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ours")]
    method: Method,
    #[command(flatten)]
    flags: MethodFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Prediction directory written by `estimate`; repeatable.
    #[arg(long = "pred-dir", required = true)]
    pred_dirs: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Method specs; defaults to every applicable method.
    #[arg(long, num_args = 1..)]
    methods: Vec<Method>,
    #[command(flatten)]
    flags: MethodFlags,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn is_non_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn gen_data(a: GenData) -> Result<()> {
    let params = SceneParams {
        d_min: a.dmin,
        d_max: a.dmax,
        ..SceneParams::sized(a.size, a.size)
    };
    params.validate()?;
    if is_non_empty_dir(&a.out) {
        if !a.force {
            return Err(Error::InvalidArgument(format!(
                "{} is not empty; pass --force to replace the scene set",
                a.out.display()
            )));
        }
        let scenes = a.out.join("scenes");
        if scenes.exists() {
            std::fs::remove_dir_all(&scenes).map_err(|e| Error::Io { path: scenes, source: e })?;
        }
    }
    create_dir(&a.out)?;
    let set = SceneSet::generate(a.seed, a.count, a.split, params)?;
    set.write(&a.out)?;
    eprintln!("wrote {} {:?} scenes to {}", set.len(), a.split, a.out.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let data = SceneSet::read(&a.data)?;
    let config = ModelConfig {
        predictive: a.predictive,
        ..ModelConfig::default()
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        ..TrainOptions::default()
    };
    let mut model = train::train_fixture(config, &data.scenes, a.seed, &opts)?;
    let test = data.companion(a.test_count.unwrap_or(data.len()).max(1))?;
    let abs_rel = train::mean_abs_rel(&model, &test.scenes)?;
    model.provenance.fixture_abs_rel = Some(abs_rel);
    create_dir(&a.out)?;
    save_model(&model, &a.out)?;
    eprintln!("trained for {} epochs; test Abs Rel {abs_rel:.4}", a.epochs);
    Ok(())
}

fn estimate_cmd(a: Estimate) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = SceneSet::read(&a.data)?;
    let method = a.method.with_overrides(&a.flags.overrides());
    let preds = pipeline::predict_dataset(&model, &data, &method)?;
    create_dir(&a.out)?;
    pipeline::write_predictions(&a.out, &method, &preds)?;
    eprintln!("wrote {} `{method}` predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let data = SceneSet::read(&a.data)?;
    let evals = a
        .pred_dirs
        .iter()
        .map(|dir| {
            let (method, preds) = pipeline::read_predictions(dir, &data)?;
            pipeline::evaluate_predictions(&method, &data, &preds, a.steps, a.bins)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.out)?;
    write_text(&a.out.join("sparsification.csv"), &pipeline::sparsification_csv(&evals))?;
    write_text(&a.out.join("report.csv"), &pipeline::report_csv(&evals))?;
    eprintln!("evaluated {} method(s) on {} scenes", evals.len(), data.len());
    Ok(())
}

fn compare_cmd(a: Compare) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = SceneSet::read(&a.data)?;
    let methods = if a.methods.is_empty() {
        Method::default_set(model.config().predictive)
    } else {
        a.methods
    };
    let overrides = a.flags.overrides();
    let methods: Vec<Method> = methods.into_iter().map(|m| m.with_overrides(&overrides)).collect();
    let evals = pipeline::compare(&model, &data, &methods, a.steps, a.bins)?;
    create_dir(&a.out)?;
    let table = pipeline::table_csv(&evals);
    write_text(&a.out.join("table.csv"), &table)?;
    write_text(&a.out.join("report.csv"), &pipeline::report_csv(&evals))?;
    print!("{table}");
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRUMO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Parse {
            input: v.clone(),
            reason: "GRUMO_THREADS must be a positive integer".into(),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_DATA })
        }
    }
}
