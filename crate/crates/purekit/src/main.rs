//! The purekit command pipeline: generate or import data, train the energy
//! model, poison, purify, train classifiers, evaluate, and emit
//! diagnostics. One process per command, one summary line on stdout,
//! details in files, and a config echo next to every artifact.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use purekit::config::{ConfigError, ConfigFile, Echo};
use purekit::csvout;
use purekit::data::{self, DataError, ToyConfig};
use purekit::io::{self, IoError};
use purekit::pool::ThreadPool;

use purekit_core::defense::{
    self, natural_accuracy, per_class_accuracy, psr_triggered, psr_triggerless, ClassifierConfig,
};
use purekit_core::ebm::{self, init_bank, train_resume, TrainConfig, TrainObserver, TrainStats};
use purekit_core::langevin::{lyapunov_exponent, purify, trajectory_distances, LangevinConfig};
use purekit_core::net::{Model, NetworkParams, NetworkSpec};
use purekit_core::poison::{
    build_poisoned_dataset, craft_trigger, PoisonKind, PoisonSpec, PoisonedDataset,
    DEFAULT_TRIGGER_ITERS, DEFAULT_XI,
};
use purekit_core::tensor::ImageTensor;
use purekit_core::Error as CoreError;

// ── Exit codes ───────────────────────────────────────────────────────────────

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_FORMAT: u8 = 5;
const EXIT_NUMERIC: u8 = 6;
const EXIT_INFEASIBLE: u8 = 7;

const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  2  command-line usage error
  3  config file error (syntax, unknown or duplicate keys, bad values)
  4  file system error (missing or unreadable/unwritable paths)
  5  artifact validation error (bad magic, truncation, shape mismatch)
  6  numeric failure (non-finite values, divergence, degenerate coupling)
  7  infeasible request (e.g. poison budget impossible on this dataset)";

#[derive(Debug, thiserror::Error)]
enum CmdError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
}

impl CmdError {
    fn exit_code(&self) -> u8 {
        match self {
            CmdError::Config(_) => EXIT_CONFIG,
            CmdError::Io(IoError::File { .. }) => EXIT_IO,
            CmdError::Io(_) => EXIT_FORMAT,
            CmdError::Data(DataError::File { .. }) => EXIT_IO,
            CmdError::Data(_) => EXIT_FORMAT,
            CmdError::Core(e) => match e {
                CoreError::NonFinite { .. }
                | CoreError::Diverged { .. }
                | CoreError::DegenerateCoupling { .. }
                | CoreError::ChainFailed { .. }
                | CoreError::Aborted { .. } => EXIT_NUMERIC,
                CoreError::InfeasiblePoison(_) => EXIT_INFEASIBLE,
                _ => EXIT_FORMAT,
            },
            CmdError::Usage(_) => EXIT_CONFIG,
        }
    }
}

type CmdResult = Result<String, CmdError>;

// ── Command-line surface ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "purekit",
    about = "Energy-based purification pipeline for poisoned image datasets",
    after_help = EXIT_CODE_HELP,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob-class dataset (train + test files).
    GenData(GenDataArgs),
    /// Import binary image batches (1 label byte + 3072 pixel bytes).
    ImportCifar(ImportCifarArgs),
    /// Train the energy model with persistent-bank contrastive updates.
    TrainEbm(TrainEbmArgs),
    /// Build a poisoned copy of a dataset (clean-label attacks).
    Poison(PoisonArgs),
    /// Push every image through T steps of Langevin purification.
    Purify(PurifyArgs),
    /// Train the downstream classifier, optionally on purified data.
    TrainClassifier(TrainClassifierArgs),
    /// Evaluate a classifier: accuracy, poison success, energy gaps.
    Eval(EvalArgs),
    /// Emit diagnostic tables (trajectory distances, Lyapunov exponents).
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
}

#[derive(Subcommand)]
enum DiagnoseCommand {
    /// Coupled purification trajectories of a clean/perturbed image pair.
    Trajectory(TrajectoryArgs),
    /// Maximal Lyapunov exponent of the purification dynamics per noise
    /// scale.
    Lyapunov(LyapunovArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Optional key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed for this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for train.pimg and test.pimg.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Training images per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Test images per class.
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Class palette amplitude; larger separates classes more.
    #[arg(long)]
    margin: Option<f32>,
    /// Half-width of uniform pixel noise.
    #[arg(long)]
    noise: Option<f32>,
}

#[derive(Args)]
struct ImportCifarArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Source batch files, in order.
    #[arg(long, required = true, num_args = 1..)]
    src: Vec<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEbmArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset (labels are ignored by the energy model).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
    /// Outer contrastive update steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Batch size for positives and negatives.
    #[arg(long)]
    batch: Option<usize>,
    /// Std of Gaussian noise added to data images.
    #[arg(long)]
    data_noise: Option<f32>,
    /// Langevin steps per outer step on each negative chain.
    #[arg(long)]
    langevin_steps: Option<u64>,
    /// Langevin step size for the negative chains.
    #[arg(long)]
    step_size: Option<f32>,
    /// SGD learning rate on the energy parameters.
    #[arg(long)]
    lr: Option<f32>,
    /// Persistent bank size; 0 means one chain per training image.
    #[arg(long)]
    bank: Option<usize>,
    /// Write a training-log CSV here (step,e_pos,e_neg,gnorm).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Record every Nth step in the log.
    #[arg(long)]
    log_every: Option<u64>,
    /// Also rewrite the checkpoint every N steps (0 = only at the end).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct PoisonArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Clean training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory for poisoned.pimg, mask.pebm, and trigger.pebm.
    #[arg(long)]
    out_dir: PathBuf,
    /// Attack kind: "triggered" or "triggerless".
    #[arg(long)]
    kind: Option<String>,
    /// Per-pixel perturbation budget.
    #[arg(long)]
    xi: Option<f32>,
    /// Poisoned fraction: of the target class (triggered) or of the whole
    /// set (triggerless).
    #[arg(long)]
    alpha: Option<f32>,
    /// The class the attack is built around.
    #[arg(long)]
    target_class: Option<usize>,
    /// Adversarial label for triggerless poisoning.
    #[arg(long)]
    adv_label: Option<usize>,
    /// Trigger crafting iterations.
    #[arg(long)]
    trigger_iters: Option<u64>,
    /// Surrogate classifier checkpoint to craft against; trained on the
    /// clean data here when absent.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Epochs for the internally trained surrogate.
    #[arg(long)]
    surrogate_epochs: Option<u64>,
}

#[derive(Args)]
struct PurifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input dataset.
    #[arg(long)]
    data: PathBuf,
    /// Energy-model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output dataset.
    #[arg(long)]
    out: PathBuf,
    /// Langevin steps T.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    step_size: Option<f32>,
    /// Noise multiplier eta.
    #[arg(long)]
    noise_scale: Option<f32>,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Output parameter file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Comma-separated epoch indices where the rate decays.
    #[arg(long)]
    decay_epochs: Option<String>,
    #[arg(long)]
    decay_factor: Option<f32>,
    /// Energy-model checkpoint; when given, training data is purified
    /// first (the defended pipeline).
    #[arg(long)]
    ebm: Option<PathBuf>,
    /// Purification steps T for the defended pipeline.
    #[arg(long)]
    purify_steps: Option<u64>,
    #[arg(long)]
    purify_step_size: Option<f32>,
    #[arg(long)]
    purify_noise_scale: Option<f32>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Classifier parameter file.
    #[arg(long)]
    model: PathBuf,
    /// Test dataset.
    #[arg(long)]
    test: PathBuf,
    /// Text report destination.
    #[arg(long)]
    out: PathBuf,
    /// Trigger image; enables the triggered poison-success rate.
    #[arg(long)]
    trigger: Option<PathBuf>,
    /// Target class of the triggered attack.
    #[arg(long)]
    target_class: Option<usize>,
    /// Target-scenario dataset (labels = adversarial labels); enables the
    /// triggerless poison-success rate.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Energy-model checkpoint; enables the energy-gap block.
    #[arg(long)]
    ebm: Option<PathBuf>,
    /// Clean images for the energy gap.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Poisoned copies of the same images.
    #[arg(long)]
    poisoned: Option<PathBuf>,
    /// Purified copies of the same images.
    #[arg(long)]
    purified: Option<PathBuf>,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Energy-model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset holding the probe image.
    #[arg(long)]
    data: PathBuf,
    /// Index of the probe image in the dataset.
    #[arg(long)]
    index: Option<usize>,
    /// Perturbation image added to the probe (a crafted trigger).
    #[arg(long)]
    trigger: PathBuf,
    /// Output CSV (step,d_cp,d_cpp,d_ppp).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    step_size: Option<f32>,
    #[arg(long)]
    noise_scale: Option<f32>,
    /// Record every Nth step.
    #[arg(long)]
    record_every: Option<u64>,
}

#[derive(Args)]
struct LyapunovArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Energy-model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dataset providing the chain start points.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated noise scales to probe.
    #[arg(long)]
    etas: Option<String>,
    /// Chains (dataset images) averaged per noise scale.
    #[arg(long)]
    chains: Option<usize>,
    /// Steps per chain.
    #[arg(long)]
    horizon: Option<u64>,
    /// Renormalization interval of the separation vector.
    #[arg(long)]
    renorm_every: Option<u64>,
    #[arg(long)]
    step_size: Option<f32>,
    /// Pixel clamp for the probed dynamics: "none" (free flow, the
    /// default for this diagnostic) or "lo,hi".
    #[arg(long)]
    clamp: Option<String>,
    /// Output CSV (eta,lambda).
    #[arg(long)]
    out: PathBuf,
}

// ── Shared plumbing ──────────────────────────────────────────────────────────

fn load_config(common: &CommonArgs) -> Result<ConfigFile, CmdError> {
    Ok(match &common.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::empty(),
    })
}

/// Classes are the labels' upper bound; every class below it must appear
/// densely or the classifier head would train dead outputs.
fn infer_classes(labels: &[u8]) -> Result<usize, CmdError> {
    let max = labels
        .iter()
        .copied()
        .max()
        .ok_or_else(|| CmdError::Usage("dataset is empty".into()))?;
    Ok(max as usize + 1)
}

fn classifier_spec_for(images: &[ImageTensor], classes: usize) -> Result<NetworkSpec, CmdError> {
    let first = images
        .first()
        .ok_or_else(|| CmdError::Usage("dataset is empty".into()))?;
    if first.c != 3 || first.h % 4 != 0 || first.w % 4 != 0 {
        return Err(CmdError::Usage(format!(
            "classifier needs 3-channel images with sides divisible by 4, got {}x{}x{}",
            first.c, first.h, first.w
        )));
    }
    Ok(NetworkSpec::classifier_default(first.h, first.w, classes))
}

fn load_ebm(path: &Path) -> Result<Model, CmdError> {
    let spec = NetworkSpec::energy_default();
    let params = io::load_model_params(path, &spec)?;
    Ok(Model::new(spec, params).map_err(CoreError::from)?)
}

fn parse_u64_list(text: &str, what: &str) -> Result<Vec<u64>, CmdError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CmdError::Usage(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

fn parse_f32_list(text: &str, what: &str) -> Result<Vec<f32>, CmdError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f32>()
                .map_err(|_| CmdError::Usage(format!("bad {what} entry {s:?}")))
        })
        .collect()
}

// ── gen-data ─────────────────────────────────────────────────────────────────

fn cmd_gen_data(args: &GenDataArgs, _pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let d = ToyConfig::default();
    let toy = ToyConfig {
        classes: cfg.resolve("classes", args.classes, d.classes)?,
        per_class_train: cfg.resolve("per_class", args.per_class, d.per_class_train)?,
        per_class_test: cfg.resolve("test_per_class", args.test_per_class, d.per_class_test)?,
        height: cfg.resolve("height", args.height, d.height)?,
        width: cfg.resolve("width", args.width, d.width)?,
        margin: cfg.resolve("margin", args.margin, d.margin)?,
        noise: cfg.resolve("noise", args.noise, d.noise)?,
        seed: cfg.resolve("seed", args.common.seed, d.seed)?,
    };
    cfg.finish()?;

    let (train_images, train_labels, test_images, test_labels) = data::generate(&toy)?;
    let train_path = args.out_dir.join("train.pimg");
    let test_path = args.out_dir.join("test.pimg");
    io::save_dataset(&train_path, &train_images, &train_labels)?;
    io::save_dataset(&test_path, &test_images, &test_labels)?;

    let mut echo = Echo::new("gen-data");
    echo.set("classes", toy.classes)
        .set("per_class", toy.per_class_train)
        .set("test_per_class", toy.per_class_test)
        .set("height", toy.height)
        .set("width", toy.width)
        .set("margin", toy.margin)
        .set("noise", toy.noise)
        .set("seed", toy.seed);
    echo.write_beside(&train_path)?;

    Ok(format!(
        "gen-data: wrote {} train + {} test images ({} classes, {}x{}) to {}",
        train_images.len(),
        test_images.len(),
        toy.classes,
        toy.height,
        toy.width,
        args.out_dir.display()
    ))
}

// ── import-cifar ─────────────────────────────────────────────────────────────

fn cmd_import_cifar(args: &ImportCifarArgs, _pool: &ThreadPool) -> CmdResult {
    let cfg = load_config(&args.common)?;
    cfg.finish()?;
    let (images, labels) = data::import_cifar(&args.src)?;
    io::save_dataset(&args.out, &images, &labels)?;
    let mut echo = Echo::new("import-cifar");
    for src in &args.src {
        echo.input(src)?;
    }
    echo.set("records", images.len());
    echo.write_beside(&args.out)?;
    Ok(format!(
        "import-cifar: wrote {} records to {}",
        images.len(),
        args.out.display()
    ))
}

// ── train-ebm ────────────────────────────────────────────────────────────────

/// Observer that logs stats rows and rewrites the checkpoint file.
struct CliTrainObserver<'a> {
    rows: Vec<(u64, f32, f32, f32)>,
    log_every: u64,
    checkpoint_path: &'a Path,
    meta: &'a str,
    last: Option<TrainStats>,
    save_error: Option<IoError>,
}

impl TrainObserver for CliTrainObserver<'_> {
    fn on_step(&mut self, step: u64, stats: &TrainStats) {
        if self.log_every > 0 && step % self.log_every == 0 {
            self.rows.push((step, stats.e_pos, stats.e_neg, stats.grad_norm));
        }
        self.last = Some(stats.clone());
    }

    fn on_checkpoint(
        &mut self,
        _step: u64,
        params: &NetworkParams,
        bank: &ebm::PersistentBank,
    ) -> bool {
        match io::save_checkpoint(self.checkpoint_path, params, bank, self.meta) {
            Ok(()) => true,
            Err(e) => {
                self.save_error = Some(e);
                false
            }
        }
    }
}

fn cmd_train_ebm(args: &TrainEbmArgs, pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let d = TrainConfig::default();
    let tc = TrainConfig {
        steps: cfg.resolve("steps", args.steps, d.steps)?,
        batch_size: cfg.resolve("batch", args.batch, d.batch_size)?,
        data_noise: cfg.resolve("data_noise", args.data_noise, d.data_noise)?,
        langevin_steps_per_iter: cfg.resolve(
            "langevin_steps",
            args.langevin_steps,
            d.langevin_steps_per_iter,
        )?,
        langevin_step_size: cfg.resolve("step_size", args.step_size, d.langevin_step_size)?,
        sgd_lr: cfg.resolve("lr", args.lr, d.sgd_lr)?,
        seed: cfg.resolve("seed", args.common.seed, d.seed)?,
    };
    let bank_size = cfg.resolve("bank", args.bank, 0usize)?;
    let log_every = cfg.resolve("log_every", args.log_every, 50u64)?;
    let checkpoint_every = cfg.resolve("checkpoint_every", args.checkpoint_every, 0u64)?;
    cfg.finish()?;

    let (images, _labels) = io::load_dataset(&args.data)?;
    if images.is_empty() {
        return Err(CmdError::Usage("training dataset is empty".into()));
    }
    let spec = NetworkSpec::energy_default();
    let n_bank = if bank_size == 0 { images.len() } else { bank_size };

    let mut echo = Echo::new("train-ebm");
    echo.input(&args.data)?;
    echo.set("steps", tc.steps)
        .set("batch", tc.batch_size)
        .set("data_noise", tc.data_noise)
        .set("langevin_steps", tc.langevin_steps_per_iter)
        .set("step_size", tc.langevin_step_size)
        .set("lr", tc.sgd_lr)
        .set("bank", n_bank)
        .set("log_every", log_every)
        .set("checkpoint_every", checkpoint_every)
        .set("seed", tc.seed);

    let (mut params, mut bank, start_step) = match &args.resume {
        Some(path) => {
            let (params, bank, meta) = io::load_checkpoint(path, &spec)?;
            let mut saved = ConfigFile::from_text(&meta, path)?;
            let step = saved.resolve("step", None::<u64>, 0)?;
            // The rest of the stored config is informational here.
            (params, bank, step)
        }
        None => {
            let params = NetworkParams::init(&spec, tc.seed);
            let bank = init_bank(n_bank, images[0].shape(), tc.seed).map_err(CoreError::from)?;
            (params, bank, 0)
        }
    };

    let meta = format!("{}step = {}\n", echo.render(), tc.steps);
    let mut observer = CliTrainObserver {
        rows: Vec::new(),
        log_every,
        checkpoint_path: &args.out,
        meta: &meta,
        last: None,
        save_error: None,
    };
    let result = train_resume(
        &spec,
        &mut params,
        &mut bank,
        &images,
        &tc,
        start_step,
        checkpoint_every,
        pool,
        &mut observer,
    );
    if let Some(e) = observer.save_error {
        return Err(e.into());
    }
    result.map_err(CoreError::from)?;

    io::save_checkpoint(&args.out, &params, &bank, &meta)?;
    echo.write_beside(&args.out)?;
    if let Some(log) = &args.log {
        io::write_atomic(log, csvout::train_log_csv(&observer.rows).as_bytes())?;
    }
    let tail = observer
        .last
        .map(|s| format!(" (final e_pos {:.4}, e_neg {:.4})", s.e_pos, s.e_neg))
        .unwrap_or_default();
    Ok(format!(
        "train-ebm: {} steps on {} images -> {}{}",
        tc.steps.saturating_sub(start_step),
        images.len(),
        args.out.display(),
        tail
    ))
}

// ── poison ───────────────────────────────────────────────────────────────────

fn cmd_poison(args: &PoisonArgs, pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let kind_text: String = cfg.resolve("kind", args.kind.clone(), "triggered".into())?;
    let kind = match kind_text.as_str() {
        "triggered" => PoisonKind::Triggered,
        "triggerless" => PoisonKind::TriggerlessRandom,
        other => return Err(CmdError::Usage(format!("unknown poison kind {other:?}"))),
    };
    let xi = cfg.resolve("xi", args.xi, DEFAULT_XI)?;
    let alpha = cfg.resolve("alpha", args.alpha, 1.0f32)?;
    let target_class = cfg.resolve("target_class", args.target_class, 0usize)?;
    let adv_label = cfg.resolve("adv_label", args.adv_label, target_class)?;
    let trigger_iters =
        cfg.resolve("trigger_iters", args.trigger_iters, DEFAULT_TRIGGER_ITERS)?;
    let surrogate_epochs = cfg.resolve("surrogate_epochs", args.surrogate_epochs, 5u64)?;
    let seed = cfg.resolve("seed", args.common.seed, 0u64)?;
    cfg.finish()?;

    let (images, labels) = io::load_dataset(&args.data)?;
    let classes = infer_classes(&labels)?;
    if target_class >= classes {
        return Err(CmdError::Usage(format!(
            "target class {target_class} outside the {classes} dataset classes"
        )));
    }

    let mut echo = Echo::new("poison");
    echo.input(&args.data)?;
    echo.set("kind", &kind_text)
        .set("xi", xi)
        .set("alpha", alpha)
        .set("target_class", target_class)
        .set("adv_label", adv_label)
        .set("seed", seed);

    let trigger = match kind {
        PoisonKind::TriggerlessRandom => None,
        PoisonKind::Triggered => {
            let cspec = classifier_spec_for(&images, classes)?;
            let surrogate = match &args.surrogate {
                Some(path) => {
                    echo.input(path)?;
                    io::load_params(path, &cspec)?
                }
                None => {
                    echo.set("surrogate_epochs", surrogate_epochs);
                    let ccfg = ClassifierConfig {
                        epochs: surrogate_epochs,
                        seed,
                        ..Default::default()
                    };
                    defense::train_classifier(&cspec, &images, &labels, &ccfg, pool)
                        .map_err(CoreError::from)?
                }
            };
            echo.set("trigger_iters", trigger_iters);
            let class_images: Vec<ImageTensor> = images
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l as usize == target_class)
                .map(|(x, _)| x.clone())
                .collect();
            let rho = craft_trigger(
                &cspec,
                &surrogate,
                &class_images,
                target_class,
                xi,
                trigger_iters,
                xi / 10.0,
                seed,
            )
            .map_err(CoreError::from)?;
            Some(rho)
        }
    };

    let pspec = PoisonSpec { kind, xi, alpha, target_class, adv_label, trigger: trigger.clone() };
    let poisoned = build_poisoned_dataset(&images, &labels, &pspec, seed).map_err(CoreError::from)?;

    let data_path = args.out_dir.join("poisoned.pimg");
    io::save_dataset(&data_path, &poisoned.images, &poisoned.labels)?;
    io::save_mask(&args.out_dir.join("mask.pebm"), &poisoned.poison_mask)?;
    if let Some(rho) = &trigger {
        io::save_image(&args.out_dir.join("trigger.pebm"), rho)?;
    }
    echo.write_beside(&data_path)?;

    let n_poisoned = poisoned.poison_mask.iter().filter(|&&b| b).count();
    Ok(format!(
        "poison: {} of {} images poisoned ({}) -> {}",
        n_poisoned,
        poisoned.images.len(),
        kind_text,
        args.out_dir.display()
    ))
}

// ── purify ───────────────────────────────────────────────────────────────────

fn resolve_langevin(
    cfg: &mut ConfigFile,
    steps: Option<u64>,
    step_size: Option<f32>,
    noise_scale: Option<f32>,
    prefix: &str,
) -> Result<LangevinConfig, CmdError> {
    let d = LangevinConfig::default();
    Ok(LangevinConfig {
        steps: cfg.resolve(&format!("{prefix}steps"), steps, d.steps)?,
        step_size: cfg.resolve(&format!("{prefix}step_size"), step_size, d.step_size)?,
        noise_scale: cfg.resolve(&format!("{prefix}noise_scale"), noise_scale, d.noise_scale)?,
        clamp: d.clamp,
    })
}

fn cmd_purify(args: &PurifyArgs, pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let lcfg = resolve_langevin(&mut cfg, args.steps, args.step_size, args.noise_scale, "")?;
    let seed = cfg.resolve("seed", args.common.seed, 0u64)?;
    cfg.finish()?;

    let (images, labels) = io::load_dataset(&args.data)?;
    let model = load_ebm(&args.model)?;
    let purified = purify(&images, &model, &lcfg, seed, pool).map_err(CoreError::from)?;
    io::save_dataset(&args.out, &purified, &labels)?;

    let mut echo = Echo::new("purify");
    echo.input(&args.data)?;
    echo.input(&args.model)?;
    echo.set("steps", lcfg.steps)
        .set("step_size", lcfg.step_size)
        .set("noise_scale", lcfg.noise_scale)
        .set("seed", seed);
    echo.write_beside(&args.out)?;

    Ok(format!(
        "purify: {} images through {} steps -> {}",
        purified.len(),
        lcfg.steps,
        args.out.display()
    ))
}

// ── train-classifier ─────────────────────────────────────────────────────────

fn cmd_train_classifier(args: &TrainClassifierArgs, pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let d = ClassifierConfig::default();
    let decay_text: String = cfg.resolve(
        "decay_epochs",
        args.decay_epochs.clone(),
        "15,25".into(),
    )?;
    let ccfg = ClassifierConfig {
        epochs: cfg.resolve("epochs", args.epochs, d.epochs)?,
        batch_size: cfg.resolve("batch", args.batch, d.batch_size)?,
        lr: cfg.resolve("lr", args.lr, d.lr)?,
        momentum: cfg.resolve("momentum", args.momentum, d.momentum)?,
        weight_decay: cfg.resolve("weight_decay", args.weight_decay, d.weight_decay)?,
        lr_decay_epochs: parse_u64_list(&decay_text, "decay_epochs")?,
        lr_decay_factor: cfg.resolve("decay_factor", args.decay_factor, d.lr_decay_factor)?,
        seed: cfg.resolve("seed", args.common.seed, d.seed)?,
    };
    let ebm_path = cfg.resolve_opt("ebm", args.ebm.clone())?;
    let lcfg = resolve_langevin(
        &mut cfg,
        args.purify_steps,
        args.purify_step_size,
        args.purify_noise_scale,
        "purify_",
    )?;
    cfg.finish()?;

    let (images, labels) = io::load_dataset(&args.data)?;
    let classes = infer_classes(&labels)?;
    let cspec = classifier_spec_for(&images, classes)?;

    let mut echo = Echo::new("train-classifier");
    echo.input(&args.data)?;
    echo.set("epochs", ccfg.epochs)
        .set("batch", ccfg.batch_size)
        .set("lr", ccfg.lr)
        .set("momentum", ccfg.momentum)
        .set("weight_decay", ccfg.weight_decay)
        .set("decay_epochs", &decay_text)
        .set("decay_factor", ccfg.lr_decay_factor)
        .set("seed", ccfg.seed);

    let params = match &ebm_path {
        Some(path) => {
            let model = load_ebm(path)?;
            echo.input(path)?;
            echo.set("ebm", path.display())
                .set("purify_steps", lcfg.steps)
                .set("purify_step_size", lcfg.step_size)
                .set("purify_noise_scale", lcfg.noise_scale);
            let dataset = PoisonedDataset {
                images: images.clone(),
                labels: labels.clone(),
                poison_mask: vec![false; images.len()],
            };
            defense::train_defended_classifier(&cspec, &dataset, &model, &lcfg, &ccfg, pool)
                .map_err(CoreError::from)?
        }
        None => defense::train_classifier(&cspec, &images, &labels, &ccfg, pool)
            .map_err(CoreError::from)?,
    };

    io::save_params(&args.out, &params)?;
    echo.write_beside(&args.out)?;

    let train_acc =
        natural_accuracy(&cspec, &params, &images, &labels).map_err(CoreError::from)?;
    let mode = if ebm_path.is_some() { "defended" } else { "undefended" };
    Ok(format!(
        "train-classifier: {} epochs ({}) on {} images, train accuracy {:.4} -> {}",
        ccfg.epochs,
        mode,
        images.len(),
        train_acc,
        args.out.display()
    ))
}

// ── eval ─────────────────────────────────────────────────────────────────────

fn cmd_eval(args: &EvalArgs, _pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let seed = cfg.resolve("seed", args.common.seed, 0u64)?;
    let target_class = cfg.resolve_opt("target_class", args.target_class)?;
    cfg.finish()?;

    let (test_images, test_labels) = io::load_dataset(&args.test)?;
    let classes = infer_classes(&test_labels)?;
    let cspec = classifier_spec_for(&test_images, classes)?;
    let params = io::load_params(&args.model, &cspec)?;

    let mut echo = Echo::new("eval");
    echo.input(&args.model)?;
    echo.input(&args.test)?;
    echo.set("seed", seed);

    let acc = natural_accuracy(&cspec, &params, &test_images, &test_labels)
        .map_err(CoreError::from)?;
    let pca = per_class_accuracy(&cspec, &params, &test_images, &test_labels, classes)
        .map_err(CoreError::from)?;

    let mut report = String::new();
    report += &format!("natural accuracy:    {acc:.4}\n");
    for (i, a) in pca.iter().enumerate() {
        report += &format!("  class {i} accuracy:  {a:.4}\n");
    }

    let mut summary = format!("eval: acc {acc:.4}");

    if let Some(trigger_path) = &args.trigger {
        let y_pi = target_class
            .ok_or_else(|| CmdError::Usage("--trigger needs --target-class".into()))?;
        let rho = io::load_image(trigger_path)?;
        echo.input(trigger_path)?;
        echo.set("target_class", y_pi);
        let psr = psr_triggered(&cspec, &params, &test_images, &test_labels, &rho, y_pi)
            .map_err(CoreError::from)?;
        report += &format!("triggered PSR:       {psr:.4} (target class {y_pi})\n");
        summary += &format!(", psr_tr {psr:.4}");
    }

    if let Some(targets_path) = &args.targets {
        let (timg, tlab) = io::load_dataset(targets_path)?;
        echo.input(targets_path)?;
        let pairs: Vec<(ImageTensor, usize)> =
            timg.into_iter().zip(tlab.iter().map(|&l| l as usize)).collect();
        let psr = psr_triggerless(&cspec, &params, &pairs).map_err(CoreError::from)?;
        report += &format!("triggerless PSR:     {psr:.4} ({} targets)\n", pairs.len());
        summary += &format!(", psr_notr {psr:.4}");
    }

    if let Some(ebm_path) = &args.ebm {
        let (clean_p, poisoned_p, purified_p) = match (&args.clean, &args.poisoned, &args.purified)
        {
            (Some(c), Some(p), Some(u)) => (c, p, u),
            _ => {
                return Err(CmdError::Usage(
                    "--ebm needs --clean, --poisoned, and --purified".into(),
                ))
            }
        };
        let model = load_ebm(ebm_path)?;
        let (clean, _) = io::load_dataset(clean_p)?;
        let (poisoned, _) = io::load_dataset(poisoned_p)?;
        let (purified, _) = io::load_dataset(purified_p)?;
        for p in [ebm_path, clean_p, poisoned_p, purified_p] {
            echo.input(p)?;
        }
        let gap = defense::energy_gap_report(&model, &clean, &poisoned, &purified, seed)
            .map_err(CoreError::from)?;
        report += &format!(
            "mean energy clean:    {:.5} (99% CI [{:.5}, {:.5}])\n",
            gap.mean_clean, gap.ci_clean.0, gap.ci_clean.1
        );
        report += &format!(
            "mean energy poisoned: {:.5} (99% CI [{:.5}, {:.5}])\n",
            gap.mean_poisoned, gap.ci_poisoned.0, gap.ci_poisoned.1
        );
        report += &format!(
            "mean energy purified: {:.5} (99% CI [{:.5}, {:.5}])\n",
            gap.mean_purified, gap.ci_purified.0, gap.ci_purified.1
        );
        summary += &format!(
            ", energy gap {:+.5}",
            gap.mean_poisoned - gap.mean_clean
        );
    }

    io::write_atomic(&args.out, report.as_bytes())?;
    echo.write_beside(&args.out)?;
    Ok(format!("{summary} -> {}", args.out.display()))
}

// ── diagnose ─────────────────────────────────────────────────────────────────

fn cmd_trajectory(args: &TrajectoryArgs, _pool: &ThreadPool) -> CmdResult {
    let mut cfg = load_config(&args.common)?;
    let lcfg = resolve_langevin(&mut cfg, args.steps, args.step_size, args.noise_scale, "")?;
    let index = cfg.resolve("index", args.index, 0usize)?;
    let record_every = cfg.resolve("record_every", args.record_every, 10u64)?;
    let seed = cfg.resolve("seed", args.common.seed, 0u64)?;
    cfg.finish()?;

    let (images, _) = io::load_dataset(&args.data)?;
    let x = images
        .get(index)
        .ok_or_else(|| CmdError::Usage(format!("index {index} outside dataset of {}", images.len())))?;
    let delta = io::load_image(&args.trigger)?;
    let model = load_ebm(&args.model)?;
    let record = trajectory_distances(x, &delta, &model, &lcfg, record_every, seed)
        .map_err(CoreError::from)?;
    io::write_atomic(&args.out, csvout::trajectory_csv(&record).as_bytes())?;

    let mut echo = Echo::new("diagnose-trajectory");
    echo.input(&args.data)?;
    echo.input(&args.model)?;
    echo.input(&args.trigger)?;
    echo.set("index", index)
        .set("steps", lcfg.steps)
        .set("step_size", lcfg.step_size)
        .set("noise_scale", lcfg.noise_scale)
        .set("record_every", record_every)
        .set("seed", seed);
    echo.write_beside(&args.out)?;

    let cross = match record.crossover {
        Some(t) => format!("crossover at step {t}"),
        None => format!("no crossover within {} steps", lcfg.steps),
    };
    Ok(format!("diagnose trajectory: {cross} -> {}", args.out.display()))
}

fn cmd_lyapunov(args: &LyapunovArgs, pool: &ThreadPool) -> CmdResult {
    use purekit_core::exec::Executor;

    let mut cfg = load_config(&args.common)?;
    let etas_text: String = cfg.resolve("etas", args.etas.clone(), "0.1,2.0".into())?;
    let etas = parse_f32_list(&etas_text, "etas")?;
    let chains = cfg.resolve("chains", args.chains, 8usize)?;
    let horizon = cfg.resolve("horizon", args.horizon, 1000u64)?;
    let renorm_every = cfg.resolve("renorm_every", args.renorm_every, 10u64)?;
    let step_size =
        cfg.resolve("step_size", args.step_size, LangevinConfig::default().step_size)?;
    let clamp_text: String = cfg.resolve("clamp", args.clamp.clone(), "none".into())?;
    let seed = cfg.resolve("seed", args.common.seed, 0u64)?;
    cfg.finish()?;
    if etas.is_empty() || chains == 0 {
        return Err(CmdError::Usage("need at least one eta and one chain".into()));
    }
    let clamp = match clamp_text.as_str() {
        "none" => None,
        pair => {
            let vals = parse_f32_list(pair, "clamp")?;
            let [lo, hi] = vals[..] else {
                return Err(CmdError::Usage(format!("clamp must be \"none\" or \"lo,hi\", got {pair:?}")));
            };
            Some((lo, hi))
        }
    };

    let (images, _) = io::load_dataset(&args.data)?;
    if images.len() < chains {
        return Err(CmdError::Usage(format!(
            "dataset has {} images but {chains} chains were requested",
            images.len()
        )));
    }
    let model = load_ebm(&args.model)?;

    let mut rows = Vec::with_capacity(etas.len());
    for (ei, &eta) in etas.iter().enumerate() {
        let lcfg = LangevinConfig { steps: horizon, step_size, noise_scale: eta, clamp };
        let lambdas = pool.map_collect(chains, &|c| {
            lyapunov_exponent(
                &model,
                &images[c],
                &lcfg,
                horizon,
                renorm_every,
                seed + (ei as u64) * 1_000_003 + c as u64,
            )
        });
        let mut sum = 0.0f64;
        for l in lambdas {
            sum += l.map_err(CoreError::from)?;
        }
        rows.push((eta, sum / chains as f64));
    }
    io::write_atomic(&args.out, csvout::lyapunov_csv(&rows).as_bytes())?;

    let mut echo = Echo::new("diagnose-lyapunov");
    echo.input(&args.data)?;
    echo.input(&args.model)?;
    echo.set("etas", &etas_text)
        .set("chains", chains)
        .set("horizon", horizon)
        .set("renorm_every", renorm_every)
        .set("step_size", step_size)
        .set("clamp", &clamp_text)
        .set("seed", seed);
    echo.write_beside(&args.out)?;

    let shown: Vec<String> =
        rows.iter().map(|(e, l)| format!("lambda({e}) = {l:.5}")).collect();
    Ok(format!("diagnose lyapunov: {} -> {}", shown.join(", "), args.out.display()))
}

// ── Entry point ──────────────────────────────────────────────────────────────

fn run(command: &Command, pool: &ThreadPool) -> CmdResult {
    match command {
        Command::GenData(a) => cmd_gen_data(a, pool),
        Command::ImportCifar(a) => cmd_import_cifar(a, pool),
        Command::TrainEbm(a) => cmd_train_ebm(a, pool),
        Command::Poison(a) => cmd_poison(a, pool),
        Command::Purify(a) => cmd_purify(a, pool),
        Command::TrainClassifier(a) => cmd_train_classifier(a, pool),
        Command::Eval(a) => cmd_eval(a, pool),
        Command::Diagnose(DiagnoseCommand::Trajectory(a)) => cmd_trajectory(a, pool),
        Command::Diagnose(DiagnoseCommand::Lyapunov(a)) => cmd_lyapunov(a, pool),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = ThreadPool::from_env();
    match run(&cli.command, &pool) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("purekit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
