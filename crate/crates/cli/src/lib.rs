//! The `mcl` command: synthesize datasets, train the full pipeline, evaluate,
//! predict and benchmark.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! command fails at run time.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use mcl_core::data::{
    augment_dataset, load_dataset, normalize_pixels, read_pgm, save_dataset, synth_generate_with, Dataset, Split,
    SynthParams,
};
use mcl_core::eval::{ced_curve, default_thresholds, evaluate, fps_bench, occlusion_report, report_csv, ReportRow};
use mcl_core::geometry::{clusters_for_pattern, LabelingPattern};
use mcl_core::network::{load_model, save_model, NetworkParams, INPUT_SIZE};
use mcl_core::train::run_full_pipeline;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mcl_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(mcl_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "mcl", version, about = "Multi-center learning for face alignment")]
pub struct Cli {
    /// JSON run configuration; missing keys take the published defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face dataset into the output directory.
    Synth {
        #[arg(long, value_parser = parse_pattern)]
        pattern: Option<LabelingPattern>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Run pre-training, weighting fine-tuning, per-cluster heads and
    /// assembling; writes every model and report.csv.
    Train,
    /// Mean error, failure rate and CED of one or more models.
    Eval {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Dataset directory; defaults to the config's `test`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Also report errors with this cluster gray-filled, e.g. `left_eye`.
        #[arg(long)]
        occlude_cluster: Option<String>,
    },
    /// Print the predicted landmarks of one 50x50 PGM image as "x y" lines.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Single-image inference speed.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        /// Image to time; a synthetic face otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

fn parse_pattern(s: &str) -> Result<LabelingPattern, String> {
    let n: usize = s.parse().map_err(|_| format!("`{s}` is not a landmark count"))?;
    LabelingPattern::from_count(n).map_err(|e| e.to_string())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(out) = cli.out {
        cfg.output = out;
    }
    match cli.command {
        Command::Synth { pattern, count, split } => cmd_synth(&cfg, pattern.unwrap_or(cfg.pattern), count, split),
        Command::Train => cmd_train(&cfg),
        Command::Eval {
            models,
            data,
            head,
            occlude_cluster,
        } => cmd_eval(&cfg, &models, data, head, occlude_cluster.as_deref()),
        Command::Predict { model, image, head } => cmd_predict(&model, &image, head),
        Command::Bench { model, repeats, image } => cmd_bench(&cfg, &model, repeats, image.as_deref()),
    }
}

fn cmd_synth(cfg: &RunConfig, pattern: LabelingPattern, count: usize, split: Split) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let seed = cfg.seed()?;
    let ds = synth_generate_with(pattern, count, seed, &SynthParams::default(), split)?;
    save_dataset(&ds, &cfg.output)?;
    println!("wrote {count} faces (pattern {pattern}) to {}", cfg.output.display());
    Ok(())
}

fn load_checked(path: &Path, pattern: LabelingPattern, key: &str) -> Result<Dataset, CliError> {
    let ds = load_dataset(path)?;
    if ds.pattern != pattern {
        return Err(CliError::Usage(format!(
            "`{key}` dataset has pattern {}, config says {pattern}",
            ds.pattern
        )));
    }
    if ds.is_empty() {
        return Err(CliError::Usage(format!("`{key}` dataset {} is empty", path.display())));
    }
    Ok(ds)
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_for_training()?;
    let seed = cfg.seed()?;
    let path = |p: &Option<PathBuf>| p.clone().expect("validated");
    let train = load_checked(&path(&cfg.train), cfg.pattern, "train")?;
    let val = load_checked(&path(&cfg.val), cfg.pattern, "val")?;
    let test = match &cfg.test {
        Some(p) => Some(load_checked(p, cfg.pattern, "test")?),
        None => None,
    };
    let train = if cfg.augment {
        let aug = augment_dataset(&train, &cfg.augmentation, seed)?;
        info!("augmented {} training faces into {}", train.len(), aug.len());
        aug
    } else {
        train
    };

    let (models, mut rows) = run_full_pipeline(&train, &val, &cfg.pipeline(), seed)?;
    if let Some(test) = &test {
        for (name, m) in [("BM", &models.bm), ("WM", &models.wm), ("AM", &models.am)] {
            let r = evaluate(m, 0, test)?;
            rows.push(ReportRow {
                model: name.into(),
                dataset: test.split.to_string(),
                mean_error: r.mean_error,
                failure_rate: r.failure_rate,
            });
        }
    }

    let out = &cfg.output;
    fs::create_dir_all(out)?;
    save_model(&models.bm, out.join("bm.mcl"))?;
    save_model(&models.wm, out.join("wm.mcl"))?;
    for i in 0..models.heads.len() {
        save_model(&models.head_model(i)?, out.join(format!("head_{i}.mcl")))?;
    }
    save_model(&models.am, out.join("am.mcl"))?;
    fs::write(out.join("report.csv"), report_csv(&rows))?;
    for r in &rows {
        println!(
            "{} on {}: mean error {:.2}%, failure rate {:.2}%",
            r.model, r.dataset, r.mean_error, r.failure_rate
        );
    }
    println!("models and report.csv written to {}", out.display());
    Ok(())
}

fn open_model(path: &Path) -> Result<NetworkParams<f32>, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("model file {} does not exist", path.display())));
    }
    Ok(load_model(path)?.1)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_eval(
    cfg: &RunConfig,
    models: &[PathBuf],
    data: Option<PathBuf>,
    head: usize,
    occlude: Option<&str>,
) -> Result<(), CliError> {
    let data = data
        .or_else(|| cfg.test.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `test` in the config".into()))?;
    if !data.join("meta.txt").is_file() {
        return Err(CliError::Usage(format!("dataset {} does not exist", data.display())));
    }
    let mut loaded = vec![];
    for p in models {
        loaded.push((model_name(p), open_model(p)?));
    }
    let ds = load_dataset(&data)?;
    if let Some((name, m)) = loaded.iter().find(|(_, m)| m.spec().pattern != ds.pattern) {
        return Err(CliError::Usage(format!(
            "model {name} predicts pattern {}, dataset has {}",
            m.spec().pattern,
            ds.pattern
        )));
    }

    let out = &cfg.output;
    fs::create_dir_all(out)?;
    let mut rows = vec![];
    for (name, m) in &loaded {
        let r = evaluate(m, head, &ds)?;
        println!("{name} on {}: {r}", ds.split);
        let ced = ced_curve(&r.per_sample_mean_errors, &default_thresholds())?;
        let file = if loaded.len() == 1 {
            "ced.csv".to_string()
        } else {
            format!("ced_{name}.csv")
        };
        fs::write(out.join(file), ced.to_csv())?;
        rows.push(ReportRow {
            model: name.clone(),
            dataset: ds.split.to_string(),
            mean_error: r.mean_error,
            failure_rate: r.failure_rate,
        });
    }
    fs::write(out.join("report.csv"), report_csv(&rows))?;

    if let Some(cluster) = occlude {
        let partition = clusters_for_pattern(ds.pattern);
        let idx = partition.names().iter().position(|n| n == cluster).ok_or_else(|| {
            CliError::Usage(format!(
                "pattern {} has no cluster `{cluster}`; clusters are {}",
                ds.pattern,
                partition.names().join(", ")
            ))
        })?;
        let refs: Vec<(&str, &NetworkParams<f32>)> = loaded.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let table = occlusion_report(&refs, &ds, idx)?;
        for c in &table.cells {
            println!(
                "{} {:?} {}: {:.2}%",
                c.model,
                c.condition,
                match c.group {
                    mcl_core::eval::LandmarkGroup::Cluster => table.cluster.as_str(),
                    mcl_core::eval::LandmarkGroup::Others => "others",
                },
                c.mean_error
            );
        }
        fs::write(out.join("occlusion.csv"), table.to_csv())?;
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<mcl_core::Tensor<f32>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read image {}: {e}", path.display())))?;
    let img = read_pgm(&bytes)?;
    if img.width != INPUT_SIZE || img.height != INPUT_SIZE {
        return Err(CliError::Usage(format!(
            "image {} is {}x{}, the network takes {INPUT_SIZE}x{INPUT_SIZE}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(normalize_pixels(&img.to_tensor()))
}

fn cmd_predict(model: &Path, image: &Path, head: usize) -> Result<(), CliError> {
    let params = open_model(model)?;
    let x = read_image(image)?;
    let shape = params.predict_shape(head, &params.extract_features(&x)?)?;
    for [x, y] in shape.points() {
        println!("{x} {y}");
    }
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, model: &Path, repeats: usize, image: Option<&Path>) -> Result<(), CliError> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let params = open_model(model)?;
    let img = match image {
        Some(p) => read_image(p)?,
        None => {
            let ds = synth_generate_with(
                params.spec().pattern,
                1,
                cfg.seed.unwrap_or(0),
                &SynthParams::default(),
                Split::Test,
            )?;
            ds.samples[0].normalized_image()
        }
    };
    let fps = fps_bench(&params, 0, &[img], repeats)?;
    println!("fps={fps:.2}");
    Ok(())
}
