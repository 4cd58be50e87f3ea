//! Command-line entry point: dataset generation, training, evaluation,
//! reconstruction export, and benchmarking. Every command records its full
//! run configuration for provenance and is deterministic under fixed seeds
//! in single-threaded mode.

use crate::bench::{bench_epoch, bench_routing, BenchReport, MIN_REPEATS};
use crate::checkpoint::{
    build_version, load_checkpoint, load_dataset, save_checkpoint, save_dataset, AdamState,
    CheckpointMeta,
};
use crate::container::ContainerWriter;
use crate::data::synth::{synth_nodules, SynthParams};
use crate::data::{self, idx, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::{predict, ConvSpec, Model, ModelConfig, DecoderVariant, PrimaryCapsSpec, Variant};
use crate::routing::RoutingGrouping;
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};
use crate::train::{self, evaluate, train, TrainOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "fastcaps", version, about = "Capsule network engine with consistent dynamic routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Master seed for anything random in the command.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,

    /// Worker threads for batch-parallel tensor ops (1 = bit-exact
    /// reference path).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Floating-point width for model parameters and activations.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,

    /// Dynamic-routing iterations.
    #[arg(long, global = true, default_value_t = 3)]
    pub routing_iters: usize,

    /// Output path: a file for gen-data, a directory for everything else.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic nodule/non-nodule volume dataset.
    GenData(GenDataArgs),
    /// Train a model; writes per-epoch metrics and the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes metrics and PR-curve CSVs.
    Eval(EvalArgs),
    /// Export input/reconstruction pairs for the first k test samples.
    Reconstruct(ReconstructArgs),
    /// Benchmark consistent vs original routing.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of volumes (>= 2).
    #[arg(long)]
    pub n: usize,
    /// Volume side length.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Additive Gaussian noise sigma.
    #[arg(long, default_value_t = 0.04)]
    pub noise: f64,
    /// Nodule class prior.
    #[arg(long, default_value_t = 0.56)]
    pub prior: f64,
    /// Train/val/test fractions, comma separated, summing to 1.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub splits: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    #[value(name = "original-2d")]
    Original2d,
    #[value(name = "fast-2d")]
    Fast2d,
    #[value(name = "fast-3d")]
    Fast3d,
    #[value(name = "tiny-test")]
    TinyTest,
    /// Reduced fast-3d for desk-scale runs.
    #[value(name = "fast-3d-tiny")]
    Fast3dTiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Conv,
    Ff,
    None,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset container produced by gen-data.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    pub data: Option<PathBuf>,
    /// IDX image file (2D models).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelArg::Fast2d)]
    pub variant: ModelArg,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub m_plus: f64,
    #[arg(long, default_value_t = 0.1)]
    pub m_minus: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_down: f64,
    /// Reconstruction loss weight alpha.
    #[arg(long, default_value_t = 0.0005)]
    pub recon_weight: f64,
    /// Override conv1 filter count.
    #[arg(long)]
    pub conv1_filters: Option<usize>,
    /// Override the primary capsule dimension.
    #[arg(long)]
    pub caps_dim: Option<usize>,
    /// Override the decoder head.
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Train-split fraction(s); a comma list runs the small-training-set
    /// sweep and writes accuracy_vs_size.csv.
    #[arg(long, default_value = "1.0")]
    pub train_fraction: String,
    /// Seeds per fraction in sweep mode.
    #[arg(long, default_value_t = 3)]
    pub sweep_seeds: usize,
    /// Resume from a checkpoint (must match variant and precision).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Middle-slice axis when feeding 3D volumes to a 2D model.
    #[arg(long, default_value_t = 0)]
    pub slice_axis: usize,
    /// Stop once test accuracy reaches this percentage.
    #[arg(long)]
    pub stop_at_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub slice_axis: usize,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of test samples to export.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub slice_axis: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Routing,
    Epoch,
    All,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchMode::All)]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Batches per timed epoch sample.
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

/// Parse argv and run. The binary maps errors to exit code 1 on stderr.
pub fn run_from<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    ops::set_threads(cli.threads);
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(&cli, args),
        Command::Train(args) => match cli.precision {
            Precision::F32 => cmd_train::<f32>(&cli, args),
            Precision::F64 => cmd_train::<f64>(&cli, args),
        },
        Command::Eval(args) => match cli.precision {
            Precision::F32 => cmd_eval::<f32>(&cli, args),
            Precision::F64 => cmd_eval::<f64>(&cli, args),
        },
        Command::Reconstruct(args) => match cli.precision {
            Precision::F32 => cmd_reconstruct::<f32>(&cli, args),
            Precision::F64 => cmd_reconstruct::<f64>(&cli, args),
        },
        Command::Bench(args) => cmd_bench(&cli, args),
    }
}

#[derive(Serialize)]
struct RunConfig {
    command: String,
    build_version: String,
    seed: u64,
    threads: usize,
    precision: String,
    routing_iters: usize,
    out: String,
    args: serde_json::Value,
}

fn run_config(cli: &Cli, command: &str, args: serde_json::Value) -> serde_json::Value {
    serde_json::to_value(RunConfig {
        command: command.to_string(),
        build_version: build_version(),
        seed: cli.seed,
        threads: cli.threads,
        precision: match cli.precision {
            Precision::F32 => "f32".into(),
            Precision::F64 => "f64".into(),
        },
        routing_iters: cli.routing_iters,
        out: cli.out.display().to_string(),
        args,
    })
    .expect("serializable")
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_header_comment() -> String {
    format!("# fastcaps {} run_config=run_config.json\n", build_version())
}

fn write_run_config(dir: &Path, rc: &serde_json::Value) -> Result<()> {
    write_text(&dir.join("run_config.json"), &serde_json::to_string_pretty(rc)?)
}

// ── gen-data ─────────────────────────────────────────────────────────

fn parse_splits(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("bad split fractions '{s}': {e}")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(
            "need exactly three split fractions".into(),
        ));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let params = SynthParams {
        size: args.size,
        noise_sigma: args.noise,
        positive_prior: args.prior,
    };
    let mut manifest = synth_nodules(args.n, cli.seed, &params)?;
    data::split(&mut manifest, parse_splits(&args.splits)?, cli.seed)?;
    if let Some(dir) = cli.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    save_dataset(&cli.out, &manifest)?;
    println!(
        "wrote {} samples to {} ({:.1}% nodules; splits {}/{}/{})",
        manifest.len(),
        cli.out.display(),
        100.0 * manifest.positive_fraction(),
        manifest.indices_of(Split::Train).len(),
        manifest.indices_of(Split::Val).len(),
        manifest.indices_of(Split::Test).len(),
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn load_any_dataset(args: &TrainArgs) -> Result<DatasetManifest> {
    match (&args.data, &args.images, &args.labels) {
        (Some(path), None, None) => load_dataset(path),
        (None, Some(images), Some(labels)) => {
            let mut m = idx::load_idx(images, labels)?;
            data::split(&mut m, (0.8, 0.1, 0.1), 1)?;
            Ok(m)
        }
        _ => Err(Error::InvalidArgument(
            "provide --data, or --images with --labels".into(),
        )),
    }
}

fn build_config(cli: &Cli, args: &TrainArgs, data_sp: &[usize]) -> Result<ModelConfig> {
    let mut cfg = match args.variant {
        ModelArg::Original2d => ModelConfig::preset(Variant::Original2d),
        ModelArg::Fast2d => ModelConfig::preset(Variant::Fast2d),
        ModelArg::Fast3d => ModelConfig::preset(Variant::Fast3d),
        ModelArg::TinyTest => ModelConfig::preset(Variant::TinyTest),
        ModelArg::Fast3dTiny => ModelConfig::fast3d_tiny(),
    };
    cfg.routing_iters = cli.routing_iters;
    if let Some(f) = args.conv1_filters {
        cfg.conv1 = ConvSpec { filters: f, ..cfg.conv1 };
    }
    if let Some(d) = args.caps_dim {
        cfg.primary = PrimaryCapsSpec { capsule_dim: d, ..cfg.primary };
    }
    if let Some(dec) = args.decoder {
        cfg.decoder = match dec {
            DecoderArg::Conv => DecoderVariant::Conv,
            DecoderArg::Ff => DecoderVariant::FeedForward,
            DecoderArg::None => DecoderVariant::None,
        };
    }
    // adapt the input shape to the dataset (2D models slice 3D data)
    let want_rank = cfg.spatial_rank();
    let got: Vec<usize> = match (want_rank, data_sp.len()) {
        (2, 3) => {
            if args.slice_axis >= 3 {
                return Err(Error::InvalidArgument("slice axis out of range".into()));
            }
            data_sp
                .iter()
                .enumerate()
                .filter_map(|(i, &e)| (i != args.slice_axis).then_some(e))
                .collect()
        }
        (2, 2) | (3, 3) => data_sp.to_vec(),
        _ => {
            return Err(Error::Config(format!(
                "{}D model cannot consume {}D samples",
                want_rank,
                data_sp.len()
            )))
        }
    };
    cfg.input_shape = got;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad fraction '{p}': {e}")))
        })
        .collect()
}

fn slice_axis_for(cfg: &ModelConfig, data_sp: usize, axis: usize) -> Option<usize> {
    (cfg.spatial_rank() == 2 && data_sp == 3).then_some(axis)
}

fn cmd_train<T: Scalar>(cli: &Cli, args: &TrainArgs) -> Result<()> {
    ensure_out_dir(&cli.out)?;
    let manifest = load_any_dataset(args)?;
    let data_sp = manifest.samples[0].voxels.dims().to_vec();
    let fractions = parse_fractions(&args.train_fraction)?;
    let loss = LossConfig {
        m_plus: args.m_plus,
        m_minus: args.m_minus,
        lambda_down: args.lambda_down,
        recon_weight: args.recon_weight,
    };
    loss.validate()?;
    let rc = run_config(
        cli,
        "train",
        serde_json::json!({
            "variant": format!("{:?}", args.variant),
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "loss": loss,
            "train_fraction": args.train_fraction,
            "data": args.data.as_ref().map(|p| p.display().to_string()),
        }),
    );
    write_run_config(&cli.out, &rc)?;

    if fractions.len() > 1 {
        return sweep_train::<T>(cli, args, &manifest, &fractions, &loss, &rc);
    }

    let (mut model, mut adam, start_epoch, mut history) = match &args.resume {
        Some(path) => {
            let (model, adam, meta) = load_checkpoint::<T>(path)?;
            let adam = match adam {
                Some(a) => a,
                None => AdamState::new(&model)?,
            };
            (model, adam, meta.epoch, meta.metrics_history)
        }
        None => {
            let cfg = build_config(cli, args, &data_sp)?;
            let model = Model::<T>::build(cfg, cli.seed)?;
            let adam = AdamState::new(&model)?;
            (model, adam, 0, Vec::new())
        }
    };
    let slice_axis = slice_axis_for(&model.config, data_sp.len(), args.slice_axis);
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        loss,
        seed: cli.seed,
        train_fraction: fractions[0],
        slice_axis,
        log: true,
        ..Default::default()
    };

    let mut remaining = args.epochs;
    let mut epoch_base = start_epoch;
    let mut best: Option<train::BestSnapshot<T>> = None;
    // chunked so --stop-at-accuracy can bail out between epochs
    let chunk_size = if args.stop_at_accuracy.is_some() { 1 } else { remaining };
    while remaining > 0 {
        let step = chunk_size.min(remaining);
        let chunk_opts = TrainOptions { epochs: step, ..opts.clone() };
        let out = train(&mut model, &manifest, &chunk_opts, adam, epoch_base)?;
        adam = out.adam;
        epoch_base += step;
        remaining -= step;
        history.extend(out.history.iter().copied());
        let replace = match (&best, &out.best) {
            (None, _) => true,
            (Some(b), cand) => {
                let key = |h: &[crate::checkpoint::EpochMetrics], epoch: usize| {
                    h.iter()
                        .find(|m| m.epoch == epoch)
                        .map(|m| (m.val_error_rate, m.val_loss))
                        .unwrap_or((f64::INFINITY, f64::INFINITY))
                };
                key(&history, cand.epoch) < key(&history, b.epoch)
            }
        };
        if replace {
            best = Some(train::BestSnapshot {
                epoch: out.best.epoch,
                params: out.best.params,
                adam: out.best.adam,
            });
        }
        if let Some(target) = args.stop_at_accuracy {
            let last = history.last().expect("epoch ran");
            if 100.0 - last.test_error_rate >= target {
                println!(
                    "reached {:.2}% test accuracy at epoch {}; stopping early",
                    100.0 - last.test_error_rate,
                    last.epoch
                );
                break;
            }
        }
    }

    let best = best.expect("at least one epoch ran");
    let mut csv = csv_header_comment();
    csv.push_str(&train::metrics_csv(&history));
    write_text(&cli.out.join("metrics.csv"), &csv)?;

    // checkpoint holds the best-validation parameters and optimizer state
    let mut best_model = model.clone();
    for (p, t) in best_model.params_mut().iter_mut().zip(&best.params) {
        p.tensor = t.clone();
    }
    let meta = CheckpointMeta {
        config: best_model.config.clone(),
        epoch: best.epoch,
        seed: cli.seed,
        metrics_history: history.clone(),
        run_config: rc,
        build_version: build_version(),
    };
    save_checkpoint(&cli.out.join("checkpoint.fcap"), &best_model, Some(&best.adam), &meta)?;
    println!(
        "trained {} epochs; best val error {:.2}% at epoch {}; wrote {}",
        history.len(),
        history
            .iter()
            .find(|m| m.epoch == best.epoch)
            .map(|m| m.val_error_rate)
            .unwrap_or(f64::NAN),
        best.epoch,
        cli.out.join("checkpoint.fcap").display()
    );
    Ok(())
}

fn sweep_train<T: Scalar>(
    cli: &Cli,
    args: &TrainArgs,
    manifest: &DatasetManifest,
    fractions: &[f64],
    loss: &LossConfig,
    _rc: &serde_json::Value,
) -> Result<()> {
    let data_sp = manifest.samples[0].voxels.dims().to_vec();
    let mut rows = String::from("fraction,seed,test_accuracy\n");
    let mut csv = csv_header_comment();
    for &fraction in fractions {
        for k in 0..args.sweep_seeds.max(1) {
            let seed = cli.seed + k as u64;
            let cfg = build_config(cli, args, &data_sp)?;
            let mut model = Model::<T>::build(cfg, seed)?;
            let slice_axis = slice_axis_for(&model.config, data_sp.len(), args.slice_axis);
            let opts = TrainOptions {
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.lr,
                loss: *loss,
                seed,
                train_fraction: fraction,
                slice_axis,
                log: false,
                ..Default::default()
            };
            let adam = AdamState::new(&model)?;
            let out = train(&mut model, manifest, &opts, adam, 0)?;
            // evaluate the best snapshot on the test split
            for (p, t) in model.params_mut().iter_mut().zip(&out.best.params) {
                p.tensor = t.clone();
            }
            let report = evaluate(&model, manifest, Split::Test, args.batch_size, slice_axis)?;
            println!(
                "fraction {fraction:.2} seed {seed}: test accuracy {:.2}%",
                report.accuracy
            );
            rows.push_str(&format!("{fraction:.4},{seed},{:.4}\n", report.accuracy));
        }
    }
    csv.push_str(&rows);
    write_text(&cli.out.join("accuracy_vs_size.csv"), &csv)?;
    println!("wrote {}", cli.out.join("accuracy_vs_size.csv").display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
    }
}

fn check_data_matches(cfg: &ModelConfig, data_sp: &[usize], slice_axis: usize) -> Result<Option<usize>> {
    let axis = slice_axis_for(cfg, data_sp.len(), slice_axis);
    let effective: Vec<usize> = match axis {
        Some(a) => data_sp
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| (i != a).then_some(e))
            .collect(),
        None => data_sp.to_vec(),
    };
    if effective != cfg.input_shape {
        return Err(Error::Config(format!(
            "checkpoint expects input {:?}, dataset provides {:?}",
            cfg.input_shape, effective
        )));
    }
    Ok(axis)
}

fn cmd_eval<T: Scalar>(cli: &Cli, args: &EvalArgs) -> Result<()> {
    ensure_out_dir(&cli.out)?;
    let (model, _, _) = load_checkpoint::<T>(&args.checkpoint)?;
    let manifest = load_dataset(&args.data)?;
    let data_sp = manifest.samples[0].voxels.dims().to_vec();
    let slice_axis = check_data_matches(&model.config, &data_sp, args.slice_axis)?;
    let split = parse_split(&args.split)?;
    let report = evaluate(&model, &manifest, split, 16, slice_axis)?;

    let rc = run_config(
        cli,
        "eval",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "data": args.data.display().to_string(),
            "split": args.split,
        }),
    );
    write_run_config(&cli.out, &rc)?;
    let mut metrics = csv_header_comment();
    metrics.push_str(&report.summary_csv());
    write_text(&cli.out.join("eval_metrics.csv"), &metrics)?;
    let mut pr = csv_header_comment();
    pr.push_str(&report.pr_csv());
    write_text(&cli.out.join("pr_curve.csv"), &pr)?;
    println!(
        "{} split: precision {:.2} recall {:.2} error rate {:.2}",
        args.split, report.precision, report.recall, report.error_rate
    );
    Ok(())
}

// ── reconstruct ──────────────────────────────────────────────────────

fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let [h, w] = *image.dims() else {
        return Err(Error::shape("write_pgm", "2D image", image.shape()));
    };
    let mut bytes = format!("P5\n# fastcaps {} run_config=run_config.json\n{w} {h}\n255\n", build_version())
        .into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_volume(path: &Path, volume: &Tensor<f32>, rc: &serde_json::Value) -> Result<()> {
    let mut w = ContainerWriter::new();
    w.add("volume", volume);
    w.write(path, "volume", serde_json::json!({"run_config": rc}))
}

fn cmd_reconstruct<T: Scalar>(cli: &Cli, args: &ReconstructArgs) -> Result<()> {
    ensure_out_dir(&cli.out)?;
    let (model, _, _) = load_checkpoint::<T>(&args.checkpoint)?;
    if model.config.decoder == DecoderVariant::None {
        return Err(Error::Config(
            "checkpoint has no decoder; reconstruct needs conv or ff".into(),
        ));
    }
    let manifest = load_dataset(&args.data)?;
    let data_sp = manifest.samples[0].voxels.dims().to_vec();
    let slice_axis = check_data_matches(&model.config, &data_sp, args.slice_axis)?;
    let test_idx = manifest.indices_of(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::InvalidArgument("dataset has no test split".into()));
    }
    let take: Vec<usize> = test_idx.into_iter().take(args.count).collect();

    let rc = run_config(
        cli,
        "reconstruct",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "count": args.count,
        }),
    );
    write_run_config(&cli.out, &rc)?;

    let (batch, _) = manifest.batch(&take, slice_axis)?;
    let input: Tensor<T> = batch.cast();
    let mut fwd = model.forward(&input)?;
    let classes = predict(fwd.lengths());
    let recon_id = model
        .attach_decoder(&mut fwd, &classes)?
        .expect("decoder checked above");
    let recon = fwd.tape.value(recon_id);
    let sp = model.config.input_shape.clone();
    let per: usize = sp.iter().product();
    for (k, &idx) in take.iter().enumerate() {
        let xin: Vec<f32> = input.data()[k * per..(k + 1) * per]
            .iter()
            .map(|v| v.to_f64() as f32)
            .collect();
        let xout: Vec<f32> = recon.data()[k * per..(k + 1) * per]
            .iter()
            .map(|v| v.to_f64() as f32)
            .collect();
        let tin = Tensor::from_vec(&sp, xin)?;
        let tout = Tensor::from_vec(&sp, xout)?;
        if sp.len() == 2 {
            write_pgm(&cli.out.join(format!("recon_{k:03}_input.pgm")), &tin)?;
            write_pgm(&cli.out.join(format!("recon_{k:03}_output.pgm")), &tout)?;
        } else {
            write_volume(&cli.out.join(format!("recon_{k:03}_input.fcap")), &tin, &rc)?;
            write_volume(&cli.out.join(format!("recon_{k:03}_output.fcap")), &tout, &rc)?;
        }
        let _ = idx;
    }
    println!("wrote {} reconstruction pairs to {}", take.len(), cli.out.display());
    Ok(())
}

// ── bench ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct BenchOutput {
    run_config: serde_json::Value,
    routing: Option<RoutingComparison>,
    epoch: Option<EpochComparison>,
}

#[derive(Serialize)]
struct RoutingComparison {
    baseline: BenchReport,
    fast: BenchReport,
}

#[derive(Serialize)]
struct EpochComparison {
    baseline: BenchReport,
    fast: BenchReport,
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    if args.repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!(
            "--repeats must be >= {MIN_REPEATS}"
        )));
    }
    ensure_out_dir(&cli.out)?;
    let rc = run_config(
        cli,
        "bench",
        serde_json::json!({
            "mode": format!("{:?}", args.mode),
            "repeats": args.repeats,
            "warmup": args.warmup,
            "batches": args.batches,
            "batch_size": args.batch_size,
        }),
    );
    write_run_config(&cli.out, &rc)?;
    let mut table = String::new();

    let routing = if matches!(args.mode, BenchMode::Routing | BenchMode::All) {
        // original 2D: 2048 children with per-child coefficients;
        // fast 2D: 64 children, one per location
        let baseline = bench_routing(
            2048,
            2,
            16,
            &RoutingGrouping::identity(2048),
            cli.routing_iters,
            args.repeats,
            args.warmup,
            "original-2d routing (I=2048)",
        )?;
        let mut fast = bench_routing(
            64,
            2,
            16,
            &RoutingGrouping::by_location(64, 1),
            cli.routing_iters,
            args.repeats,
            args.warmup,
            "fast-2d routing (I=64)",
        )?;
        fast.compute_speedup(&baseline);
        table.push_str(&baseline.table());
        table.push('\n');
        table.push_str(&fast.table());
        table.push('\n');
        Some(RoutingComparison { baseline, fast })
    } else {
        None
    };

    let epoch = if matches!(args.mode, BenchMode::Epoch | BenchMode::All) {
        let n = args.batches * args.batch_size;
        let mut manifest = synth_nodules(n.max(2), cli.seed, &SynthParams::default())?;
        data::split(&mut manifest, (1.0, 0.0, 0.0), cli.seed)?;
        let opts = TrainOptions {
            slice_axis: Some(0),
            loss: LossConfig::default(),
            seed: cli.seed,
            ..Default::default()
        };
        let baseline = bench_epoch(
            &ModelConfig::preset(Variant::Original2d),
            &manifest,
            args.batches,
            args.batch_size,
            args.repeats,
            args.warmup,
            &opts,
            "original-2d epoch",
        )?;
        let mut fast = bench_epoch(
            &ModelConfig::preset(Variant::Fast2d),
            &manifest,
            args.batches,
            args.batch_size,
            args.repeats,
            args.warmup,
            &opts,
            "fast-2d epoch",
        )?;
        fast.compute_speedup(&baseline);
        table.push_str(&baseline.table());
        table.push('\n');
        table.push_str(&fast.table());
        table.push('\n');
        Some(EpochComparison { baseline, fast })
    } else {
        None
    };

    let out = BenchOutput {
        run_config: rc,
        routing,
        epoch,
    };
    write_text(&cli.out.join("bench.json"), &serde_json::to_string_pretty(&out)?)?;
    write_text(&cli.out.join("bench.txt"), &table)?;
    print!("{table}");
    if let Some(r) = &out.routing {
        println!(
            "routing speedup (fast vs original): {:.2}x with coefficient counts {} vs {}",
            r.fast.speedup_vs_baseline.get("routing-forward").unwrap_or(&f64::NAN),
            r.baseline.coefficient_count,
            r.fast.coefficient_count,
        );
    }
    if let Some(e) = &out.epoch {
        println!(
            "epoch phase speedups (fast vs original): routing {:.2}x, forward {:.2}x, step {:.2}x",
            e.fast.speedup_vs_baseline.get("routing-forward").unwrap_or(&f64::NAN),
            e.fast.speedup_vs_baseline.get("full-forward").unwrap_or(&f64::NAN),
            e.fast.speedup_vs_baseline.get("full-step").unwrap_or(&f64::NAN),
        );
    }
    Ok(())
}
