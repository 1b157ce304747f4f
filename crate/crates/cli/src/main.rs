//! `visp`: train, evaluate and compare models with and without volatility
//! informed stochastic projection.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error, 3 data or
//! file error, 4 numeric abort (non-finite training loss).

mod config;
mod download;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use visp_core::data::{self, Dataset};
use visp_core::diagnostics::{self, DiagnosticsRecorder, DEFAULT_BINS};
use visp_core::nn::{DatasetKind, Model};
use visp_core::train::{evaluate, Checkpoint, RunLog, StepObserver, Trainer, CHECKPOINT_FILE, RUNLOG_FILE};
use visp_core::Error;

use config::{ConfigFlags, RunConfig};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "visp", version, about = "Volatility informed stochastic projection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Tabulate final and best test error of several runs
    Compare(CompareArgs),
    /// Fetch a dataset into a local directory
    Download(download::DownloadArgs),
    /// Write pre-activation histograms of a checkpoint's affine layers
    Acthist(ActhistArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Continue from the checkpoint in the run directory, if there is one
    #[arg(long)]
    resume: bool,
    /// Print the resolved configuration and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file, or a run directory containing one
    checkpoint: PathBuf,
    /// Dataset directory (default: data/<dataset>)
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Run directories
    runs: Vec<PathBuf>,
    /// Also write the table as CSV to this file
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ActhistArgs {
    /// Checkpoint file, or a run directory containing one
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Name used in the output file names (default: the model's variant)
    #[arg(long)]
    label: Option<String>,
    /// Number of test images in the probe batch
    #[arg(long, default_value_t = 1000)]
    probe: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Output directory (default: next to the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) | Error::InvalidSpec(_) => 2,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::TruncatedFile(_)
            | Error::CountMismatch { .. }
            | Error::RecordSizeMismatch { .. }
            | Error::FormatVersionMismatch(_)
            | Error::DatasetEmpty
            | Error::LabelOutOfRange { .. }
            | Error::ShapeMismatch { .. } => 3,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient => 4,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::config(e.0)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Download(a) => download::cmd_download(a),
        Command::Acthist(a) => cmd_acthist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_data(kind: DatasetKind, dir: &Path) -> CliResult<(Dataset, Dataset)> {
    data::load(kind, dir).map_err(|e| Failure::data(format!("cannot load {kind} from {}: {e}", dir.display())))
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = RunConfig::resolve(&args.flags)?;
    if args.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let kind = cfg.dataset_kind()?;
    let spec = cfg.model_spec()?;
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let resuming = args.resume && ckpt_path.exists();

    let mut trainer = if resuming {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.spec != spec {
            return Err(Failure::config(format!(
                "checkpoint in {} was trained with a different model configuration",
                cfg.out.display()
            )));
        }
        let mut t = Trainer::from_checkpoint(ckpt)?;
        t.set_epochs(cfg.epochs)?;
        t.set_out_dir(Some(cfg.out.clone()));
        eprintln!("resuming at epoch {} (step {})", t.epoch(), t.step());
        t
    } else {
        Trainer::new(Model::build(&spec)?, cfg.train_config())?
    };

    let (full_train, test) = load_data(kind, &cfg.data_dir)?;
    let train = if cfg.subset > 0 {
        full_train.shuffled_subset(cfg.subset, cfg.seed)?
    } else {
        full_train
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Failure::data(format!("{}: {e}", cfg.out.display())))?;

    let manifest_path = cfg.out.join(manifest::MANIFEST_FILE);
    if !(resuming && manifest_path.exists()) {
        RunManifest::new(&cfg)?.write(&manifest_path)?;
    }

    let mut recorder = match cfg.diag_interval {
        0 => None,
        n if trainer.model().projections().next().is_some() => {
            let extra = vec![
                ("seed".to_string(), cfg.seed.to_string()),
                ("learning_rate".to_string(), cfg.lr.to_string()),
                ("momentum".to_string(), cfg.momentum.to_string()),
                ("batch_size".to_string(), cfg.batch_size.to_string()),
                ("epochs".to_string(), cfg.epochs.to_string()),
            ];
            DiagnosticsRecorder::write_metadata(&cfg.out, trainer.model(), n, &extra)?;
            Some(
                DiagnosticsRecorder::new(n)?
                    .with_output(&cfg.out)
                    .with_append(resuming)
                    .with_vectors_in_memory(false),
            )
        }
        _ => None,
    };

    eprintln!(
        "training {} {} seed {} on {} examples, {} epochs",
        cfg.dataset,
        cfg.variant,
        cfg.seed,
        train.len(),
        cfg.epochs
    );
    let outcome = run_epochs(&mut trainer, &train, &test, recorder.as_mut().map(|r| r as &mut dyn StepObserver));
    if let Some(r) = &mut recorder {
        r.flush()?;
    }
    manifest::write_finished(&cfg.out, outcome.as_ref().err().map(|f| f.message.as_str()))?;
    outcome?;

    let probe_n = test.len().min(1000);
    let probe: Vec<usize> = (0..probe_n).collect();
    let (probe_x, _) = test.gather(&probe);
    let ids: Vec<String> = trainer.model().layer_ids().into_iter().map(|(id, _)| id).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let hists = diagnostics::activation_histograms(trainer.model(), &probe_x, &ids, DEFAULT_BINS)?;
    diagnostics::write_activation_histograms(&cfg.out, &cfg.variant, &hists)?;

    if let Some(last) = trainer.log().last() {
        println!("test_loss={:.6}", last.test_loss);
        println!("test_error_percent={:.6}", last.test_error_percent);
    }
    Ok(())
}

fn run_epochs(
    trainer: &mut Trainer,
    train: &Dataset,
    test: &Dataset,
    mut observer: Option<&mut dyn StepObserver>,
) -> CliResult {
    let mut none = ();
    while !trainer.is_done() {
        let obs: &mut dyn StepObserver = match observer.as_mut() {
            Some(o) => &mut **o,
            None => &mut none,
        };
        let started = std::time::Instant::now();
        if let Some(r) = trainer.run_epoch(train, test, obs)? {
            eprintln!(
                "epoch {}/{}  train_loss {:.6}  test_loss {:.6}  test_error {:.2}%  ({:.1}s)",
                r.epoch,
                trainer.config().epochs,
                r.train_loss,
                r.test_loss,
                r.test_error_percent,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_checkpoint(p: &Path) -> CliResult<Checkpoint> {
    let path = checkpoint_path(p);
    Checkpoint::load(&path).map_err(|e| Failure::data(format!("cannot read checkpoint {}: {e}", path.display())))
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model().map_err(|e| Failure::data(e.to_string()))?;
    let kind = ckpt.spec.dataset;
    let dir = args.data_dir.unwrap_or_else(|| PathBuf::from("data").join(kind.as_str()));
    let (_, test) = load_data(kind, &dir)?;
    let (loss, err) = evaluate(&model, &test)?;
    println!("test_loss={loss:.6}");
    println!("test_error_percent={err:.6}");
    Ok(())
}

struct CompareRow {
    run: String,
    dataset: String,
    variant: String,
    seed: String,
    epochs: usize,
    final_error: f64,
    best_error: f64,
}

fn compare_row(dir: &Path) -> CliResult<CompareRow> {
    let log = RunLog::read_csv(&dir.join(RUNLOG_FILE))
        .map_err(|e| Failure::data(format!("unreadable run directory {}: {e}", dir.display())))?;
    let last = log
        .last()
        .ok_or_else(|| Failure::data(format!("run directory {} has an empty run log", dir.display())))?;
    let (dataset, variant, seed) = match RunManifest::read(&dir.join(manifest::MANIFEST_FILE)) {
        Ok(m) => (m.config.dataset, m.config.variant, m.config.seed.to_string()),
        Err(_) => match Checkpoint::load(&dir.join(CHECKPOINT_FILE)) {
            Ok(c) => (
                c.spec.dataset.to_string(),
                c.spec.variant().to_string(),
                c.spec.seed.to_string(),
            ),
            Err(_) => ("?".into(), "?".into(), "?".into()),
        },
    };
    Ok(CompareRow {
        run: dir.display().to_string(),
        dataset,
        variant,
        seed,
        epochs: last.epoch,
        final_error: last.test_error_percent,
        best_error: log.best_test_error().unwrap_or(last.test_error_percent),
    })
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    if args.runs.len() < 2 {
        return Err(Failure::data(
            "compare needs at least two run directories: visp compare <RUN> <RUN>...",
        ));
    }
    let rows = args.runs.iter().map(|d| compare_row(d)).collect::<CliResult<Vec<_>>>()?;

    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    println!(
        "{:<width$}  {:<8}  {:<12}  {:>5}  {:>6}  {:>15}  {:>14}",
        "run", "dataset", "variant", "seed", "epochs", "final_error_%", "best_error_%"
    );
    for r in &rows {
        println!(
            "{:<width$}  {:<8}  {:<12}  {:>5}  {:>6}  {:>15.2}  {:>14.2}",
            r.run, r.dataset, r.variant, r.seed, r.epochs, r.final_error, r.best_error
        );
    }
    if let Some(path) = &args.csv {
        let mut s = String::from("run,dataset,variant,seed,epochs,final_test_error_percent,best_test_error_percent\n");
        for r in &rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6}\n",
                r.run, r.dataset, r.variant, r.seed, r.epochs, r.final_error, r.best_error
            ));
        }
        std::fs::write(path, s).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_acthist(args: ActhistArgs) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.restore_model().map_err(|e| Failure::data(e.to_string()))?;
    let kind = ckpt.spec.dataset;
    let dir = args.data_dir.unwrap_or_else(|| PathBuf::from("data").join(kind.as_str()));
    let (_, test) = load_data(kind, &dir)?;
    if args.probe == 0 || args.bins == 0 {
        return Err(Failure::config("--probe and --bins must be positive"));
    }
    let probe: Vec<usize> = (0..test.len().min(args.probe)).collect();
    let (x, _) = test.gather(&probe);
    let ids: Vec<String> = model.layer_ids().into_iter().map(|(id, _)| id).collect();
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let hists = diagnostics::activation_histograms(&model, &x, &ids, args.bins)?;
    let label = args.label.unwrap_or_else(|| ckpt.spec.variant().to_string());
    let out = args.out.unwrap_or_else(|| {
        let p = checkpoint_path(&args.checkpoint);
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    });
    std::fs::create_dir_all(&out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    diagnostics::write_activation_histograms(&out, &label, &hists)?;
    for (id, h) in &hists {
        let (lo, hi) = h.range();
        println!("{id} range=[{lo:.6},{hi:.6}] count={}", h.total());
    }
    Ok(())
}
