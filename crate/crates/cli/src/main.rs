use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use unitok::checkpoint::Checkpoint;
use unitok::data::{build_vocab, load_corpus, Corpus, CorpusManifest, CAPTIONS_FILE};
use unitok::metrics::{eval_reconstruction, eval_retrieval, MetricReport};
use unitok::model::{ModelConfig, Tokenizer};
use unitok::train::{
    read_curves, run_ablation_suite, AblationSummary, CurveWriter, LossReport, Mode, TrainConfig, Trainer,
    COMPONENTS,
};
use unitok::Error;

#[derive(Parser)]
#[command(name = "unitok", version, about = "Train and evaluate a unified visual tokenizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic captioned corpus to PNGs plus a TSV index.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train one model; writes curves, per-stage checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory from `gen-data`; by default the synthetic corpus
        /// described by the config is generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train all three modes on one config and summarize their curves.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Reconstruction and retrieval metrics of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        res: usize,
        /// Directory receiving metrics.csv and metrics.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Merge curve CSVs of several runs into one long-format CSV.
    ExportCurves {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Core(e) => match e {
                Error::Config { .. } | Error::Invalid(_) | Error::Shape(_) | Error::Domain(_) | Error::Corpus { .. } => 3,
                _ => 4,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e).into())
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    io(path, fs::write(path, body))
}

/// Refuses to reuse a non-empty directory unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(CliError::Validation(format!("{} exists and is not a directory", dir.display())));
    }
    if !force && dir.is_dir() && io(dir, fs::read_dir(dir))?.next().is_some() {
        return Err(CliError::Validation(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    io(dir, fs::create_dir_all(dir))
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(CliError::Validation(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io(parent, fs::create_dir_all(parent))?;
    }
    Ok(())
}

fn load_config(path: &Path, mode: Option<Mode>) -> Result<TrainConfig> {
    let text = io(path, fs::read_to_string(path))?;
    let mut cfg = TrainConfig::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn training_corpus(cfg: &TrainConfig, data: Option<&Path>) -> Result<Corpus> {
    Ok(match data {
        Some(dir) => load_corpus(dir, &dir.join(CAPTIONS_FILE))?,
        None => Corpus::synthetic(cfg.data.train_size, cfg.data.seed, cfg.data.master_resolution),
    })
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    build: String,
    config: String,
    seed: u64,
    modes: Vec<String>,
    data: Option<PathBuf>,
    started_unix: u64,
    finished_unix: Option<u64>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, cfg: &TrainConfig, modes: &[Mode], data: Option<&Path>) -> Self {
        Self {
            command: command.into(),
            build: format!("unitok {}{}", env!("CARGO_PKG_VERSION"), option_env!("UNITOK_BUILD_ID").map(|s| format!("+{s}")).unwrap_or_default()),
            config: cfg.to_text(),
            seed: cfg.seed,
            modes: modes.iter().map(|m| m.name().to_string()).collect(),
            data: data.map(Path::to_path_buf),
            started_unix: unix_now(),
            finished_unix: None,
            outputs: Vec::new(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        write_file(&dir.join("manifest.json"), text)
    }
}

fn gen_data(out: &Path, n: usize, seed: u64, res: usize, force: bool) -> Result<()> {
    let stride = ModelConfig::desk(0).stride();
    if res == 0 || res % stride != 0 {
        return Err(CliError::Validation(format!("--res {res} must be a positive multiple of {stride}")));
    }
    if n == 0 {
        return Err(CliError::Validation("--n must be positive".into()));
    }
    prepare_dir(out, force)?;
    let vocab = build_vocab();
    Corpus::synthetic(n, seed, res).export(out, &vocab, &CorpusManifest::synthetic(seed, n, res, &vocab))?;
    eprintln!("wrote {n} images to {}", out.display());
    Ok(())
}

/// One training run into `out`; the curve file is named after `curves`.
fn train_one(cfg: &TrainConfig, corpus: &Corpus, out: &Path, curves: &str) -> Result<Vec<LossReport>> {
    let mut trainer = Trainer::new(cfg.clone(), build_vocab())?;
    let mut writer = CurveWriter::create(&out.join(curves))?;
    let ckpt_dir = if curves == "curves.csv" { out.to_path_buf() } else { out.join(cfg.mode.name()) };
    io(&ckpt_dir, fs::create_dir_all(&ckpt_dir))?;
    let log = trainer.run(corpus, Some(&ckpt_dir), &mut |r| {
        writer.push(r)?;
        if r.step % 100 == 0 {
            eprintln!("{} step {} stage {} total {:.4}", cfg.mode.name(), r.step, r.stage, r.weighted_total);
        }
        Ok(())
    })?;
    Ok(log)
}

fn train(config: &Path, mode: Option<Mode>, out: &Path, data: Option<&Path>, force: bool) -> Result<()> {
    let cfg = load_config(config, mode)?;
    let corpus = training_corpus(&cfg, data)?;
    prepare_dir(out, force)?;
    write_file(&out.join("config.toml"), cfg.to_text())?;
    let mut manifest = RunManifest::new("train", &cfg, &[cfg.mode], data);
    manifest.save(out)?;
    train_one(&cfg, &corpus, out, "curves.csv")?;
    manifest.finished_unix = Some(unix_now());
    manifest.outputs = ["config.toml", "curves.csv", "stage1.ckpt", "stage2.ckpt"].map(String::from).to_vec();
    manifest.save(out)
}

fn ablate(config: &Path, out: &Path, data: Option<&Path>, force: bool) -> Result<()> {
    let cfg = load_config(config, None)?;
    let corpus = training_corpus(&cfg, data)?;
    prepare_dir(out, force)?;
    write_file(&out.join("config.toml"), cfg.to_text())?;
    let modes = unitok::train::MODES;
    let mut manifest = RunManifest::new("ablate", &cfg, &modes, data);
    manifest.save(out)?;

    let mut writers = Vec::new();
    for m in modes {
        writers.push(CurveWriter::create(&out.join(format!("curves_{}.csv", m.name())))?);
    }
    let runs = run_ablation_suite(&cfg, &build_vocab(), &corpus, &mut |mode, r| {
        let k = modes.iter().position(|&m| m == mode).expect("known mode");
        writers[k].push(r)?;
        if r.step % 100 == 0 {
            eprintln!("{} step {} total {:.4}", mode.name(), r.step, r.weighted_total);
        }
        Ok(())
    })?;
    drop(writers);
    for run in &runs {
        run.trainer.checkpoint().save(&out.join(format!("{}.ckpt", run.mode.name())))?;
    }
    let summary = AblationSummary::from_runs(runs.iter().map(|r| (r.mode, r.log.as_slice())));
    write_file(&out.join("summary.json"), serde_json::to_string_pretty(&summary).map_err(Error::from)?)?;

    manifest.finished_unix = Some(unix_now());
    manifest.outputs = vec!["config.toml".into(), "summary.json".into()];
    for m in modes {
        manifest.outputs.push(format!("curves_{}.csv", m.name()));
        manifest.outputs.push(format!("{}.ckpt", m.name()));
    }
    manifest.save(out)
}

fn eval(checkpoint: &Path, data: &Path, res: usize, out: &Path, force: bool) -> Result<()> {
    let (model, vocab) = Tokenizer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let model = model.at_resolution(res)?;
    let corpus = load_corpus(data, &data.join(CAPTIONS_FILE))?;
    if corpus.len() < 2 {
        return Err(CliError::Validation(format!("{} needs at least two images", data.display())));
    }
    prepare_dir(out, force)?;
    let mut report = MetricReport::new(res);
    report.add_recon(&eval_reconstruction(&model, &corpus, res)?);
    let (r1, r5) = eval_retrieval(&model, &vocab, &corpus, res)?;
    let n = corpus.len();
    report.push("recall1_i2t", r1.image_to_text, n);
    report.push("recall1_t2i", r1.text_to_image, n);
    report.push("recall5_i2t", r5.image_to_text, n);
    report.push("recall5_t2i", r5.text_to_image, n);
    write_file(&out.join("metrics.csv"), report.to_csv())?;
    write_file(&out.join("metrics.json"), report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Curve files of one run directory with their run labels.
fn run_curves(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let base = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    let single = dir.join("curves.csv");
    if single.is_file() {
        return Ok(vec![(base, single)]);
    }
    let mut found: Vec<_> = io(dir, fs::read_dir(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let mode = name.strip_prefix("curves_")?.strip_suffix(".csv")?.to_string();
            Some((format!("{base}/{mode}"), e.path()))
        })
        .collect();
    if found.is_empty() {
        return Err(CliError::Validation(format!("{}: no curve CSV found", dir.display())));
    }
    found.sort();
    Ok(found)
}

fn export_curves(runs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    prepare_file(out, force)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Core(Error::Invalid(e.to_string()));
    w.write_record(["run", "step", "stage", "component", "value"]).map_err(csv_err)?;
    for dir in runs {
        for (label, path) in run_curves(dir)? {
            let text = io(&path, fs::read_to_string(&path))?;
            let log = read_curves(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            for r in &log {
                for c in COMPONENTS {
                    let v = r.component(c).expect("known component");
                    w.write_record([label.as_str(), &r.step.to_string(), &r.stage.to_string(), c, &v.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Core(Error::Invalid(e.to_string())))?;
    write_file(out, bytes)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, n, seed, res, force } => gen_data(&out, n, seed, res, force),
        Cmd::Train { config, mode, out, data, force } => train(&config, mode, &out, data.as_deref(), force),
        Cmd::Ablate { config, out, data, force } => ablate(&config, &out, data.as_deref(), force),
        Cmd::Eval { checkpoint, data, res, out, force } => eval(&checkpoint, &data, res, &out, force),
        Cmd::ExportCurves { runs, out, force } => export_curves(&runs, &out, force),
    }
}

fn main() -> ExitCode {
    unitok::parallel::tune_allocator();
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
