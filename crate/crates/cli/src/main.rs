//! `pglab` — train, sample, and evaluate progressive GANs on grayscale
//! image datasets from the command line.
//!
//! Subcommands: `train`, `generate`, `evaluate`, `convert`, `phantom-gen`.
//! Configuration values resolve per field as CLI flag > config file >
//! built-in default; the config file is flat `key=value` UTF-8 text with
//! `#` comments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical abort, 5 I/O failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use pglab::data::pgm::{load_manifest_dataset, load_slice, write_dataset, write_pgm};
use pglab::data::phantom::{phantom_generate, PhantomParams};
use pglab::data::{downsample_to, SliceRecord};
use pglab::error::{Error, Result};
use pglab::losses::LossWeights;
use pglab::metrics::{
    fid_protocol, ms_ssim_protocol, to_unit_range, EmbeddingProvider, ImageSource, MetricReport,
    SsimParams,
};
use pglab::nn::NetworkRole;
use pglab::rng::normal_vec;
use pglab::scalar::Scalar;
use pglab::tensor::Tensor;
use pglab::trainer::run::{checkpoint_model_kind, load_network};
use pglab::trainer::{generate_samples, run_training, Checkpoint, ModelKind, TrainOptions};

#[derive(Parser)]
#[command(
    name = "pglab",
    version,
    about = "Desk-scale progressive GAN training and evaluation lab for grayscale images"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, writing checkpoints, sample mosaics, and a JSON log
    Train(Box<TrainArgs>),
    /// Sample images from a trained checkpoint into PGM files
    Generate(GenerateArgs),
    /// Compute FID and MS-SSIM for a checkpoint against a dataset
    Evaluate(EvaluateArgs),
    /// Convert raw PGM images into a normalized dataset with a manifest
    Convert(ConvertArgs),
    /// Generate a seeded synthetic phantom dataset
    PhantomGen(PhantomGenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model family: pggan, pggan-ssim, or alpha-gan-gp
    #[arg(long)]
    model: Option<String>,
    /// Latent vector dimension
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Final image resolution (power of two)
    #[arg(long)]
    final_res: Option<usize>,
    /// Total training iterations
    #[arg(long)]
    iters: Option<u64>,
    /// Batch size
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Reconstruction weight
    #[arg(long)]
    lambda1: Option<f64>,
    /// Adversarial-autoencoder gradient-penalty weight
    #[arg(long)]
    lambda2: Option<f64>,
    /// Wasserstein gradient-penalty weight
    #[arg(long)]
    lambda_gp: Option<f64>,
    /// Similarity-diversity weight
    #[arg(long)]
    lambda_ssim: Option<f64>,
    /// Root random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Converted dataset directory (with manifest.tsv)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Run directory (checkpoints/, samples/, logs/, reports/)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Train on an in-memory synthetic phantom dataset
    #[arg(long)]
    phantom: bool,
    /// Phantom dataset size when --phantom is set
    #[arg(long)]
    phantom_count: Option<usize>,
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint written by an identically configured run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Feature-map ceiling per layer
    #[arg(long)]
    fmap_cap: Option<usize>,
    /// Checkpoint cadence in iterations
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Element precision: f64 (default) or f32
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the PGM files
    #[arg(long)]
    out_dir: PathBuf,
    /// Element precision: f64 (default) or f32
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Real dataset directory (with manifest.tsv)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Evaluate against a synthetic phantom dataset instead
    #[arg(long)]
    phantom: bool,
    /// Phantom dataset size when --phantom is set
    #[arg(long, default_value_t = 259)]
    phantom_count: usize,
    /// Embedding provider: pixel-downsample, random-conv, external:<path>
    #[arg(long, default_value = "pixel-downsample")]
    provider: String,
    /// Samples per side for the Fréchet distance
    #[arg(long, default_value_t = 10000)]
    fid_samples: usize,
    /// Independently drawn pairs for mean MS-SSIM
    #[arg(long, default_value_t = 2000)]
    msssim_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the report (defaults to the run's reports/ dir)
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Element precision: f64 (default) or f32
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory of raw .pgm images
    #[arg(long)]
    in_dir: PathBuf,
    /// Destination dataset directory
    #[arg(long)]
    out_dir: PathBuf,
    /// Slice index recorded for every converted image
    #[arg(long, default_value_t = 64)]
    slice_index: usize,
    /// Zero-pad to this square extent before normalization
    #[arg(long)]
    pad: Option<usize>,
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Number of phantoms
    #[arg(long, default_value_t = 259)]
    count: usize,
    /// Phantom resolution (power of two)
    #[arg(long, default_value_t = 256)]
    final_res: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination dataset directory
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 = configuration, 3 = data, 4 = numerical abort, 5 = I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Shape { .. }
        | Error::NonScalarOutput(_)
        | Error::UnreachableGrad => 2,
        Error::Data(_) | Error::Format { .. } => 3,
        Error::NonFinite { .. } | Error::Numerical(_) | Error::DivisionByZero { .. } => 4,
        Error::Io { .. } => 5,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(args) => {
            let resolved = ResolvedTrain::from_args(&args)?;
            match resolved.precision.as_str() {
                "f64" => cmd_train::<f64>(&resolved),
                "f32" => cmd_train::<f32>(&resolved),
                other => Err(Error::Config(format!(
                    "precision must be f32 or f64, got {other}"
                ))),
            }
        }
        Cmd::Generate(args) => match args.precision.as_str() {
            "f64" => cmd_generate::<f64>(&args),
            "f32" => cmd_generate::<f32>(&args),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other}"
            ))),
        },
        Cmd::Evaluate(args) => match args.precision.as_str() {
            "f64" => cmd_evaluate::<f64>(&args),
            "f32" => cmd_evaluate::<f32>(&args),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other}"
            ))),
        },
        Cmd::Convert(args) => cmd_convert::<f64>(&args),
        Cmd::PhantomGen(args) => cmd_phantom_gen::<f64>(&args),
    }
}

/// Flat `key=value` config file; `#` starts a comment, blank lines are
/// skipped, later assignments win.
struct FileConfig(BTreeMap<String, String>);

const KNOWN_KEYS: &[&str] = &[
    "model",
    "latent_dim",
    "final_res",
    "iters",
    "batch",
    "lr",
    "lambda1",
    "lambda2",
    "lambda_gp",
    "lambda_ssim",
    "seed",
    "data_dir",
    "out_dir",
    "phantom",
    "phantom_count",
    "fmap_cap",
    "checkpoint_every",
    "precision",
];

impl FileConfig {
    fn empty() -> FileConfig {
        FileConfig(BTreeMap::new())
    }

    fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown config field '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
            map.insert(key, value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("config field {key}: {e}"))),
        }
    }
}

/// Train configuration after per-field precedence resolution.
#[derive(Debug)]
struct ResolvedTrain {
    model: String,
    latent_dim: usize,
    final_res: usize,
    iters: u64,
    batch: usize,
    lr: f64,
    weights: LossWeights,
    seed: u64,
    data_dir: Option<PathBuf>,
    out_dir: PathBuf,
    phantom: bool,
    phantom_count: usize,
    fmap_cap: usize,
    checkpoint_every: u64,
    precision: String,
    resume: Option<PathBuf>,
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

impl ResolvedTrain {
    fn from_args(a: &TrainArgs) -> Result<ResolvedTrain> {
        let file = match &a.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::empty(),
        };
        let model: String = pick(a.model.clone(), file.get("model")?, "pggan".into());
        let seed = pick(a.seed, file.get("seed")?, 0);
        let out_default = PathBuf::from(format!("runs/{model}-seed{seed}"));
        Ok(ResolvedTrain {
            latent_dim: pick(a.latent_dim, file.get("latent_dim")?, 512),
            final_res: pick(a.final_res, file.get("final_res")?, 256),
            iters: pick(a.iters, file.get("iters")?, 12000),
            batch: pick(a.batch, file.get("batch")?, 32),
            lr: pick(a.lr, file.get("lr")?, 1e-3),
            weights: LossWeights {
                lambda1: pick(a.lambda1, file.get("lambda1")?, 10.0),
                lambda2: pick(a.lambda2, file.get("lambda2")?, 10.0),
                lambda_gp: pick(a.lambda_gp, file.get("lambda_gp")?, 10.0),
                lambda_ssim: pick(a.lambda_ssim, file.get("lambda_ssim")?, 10.0),
            },
            seed,
            data_dir: a.data_dir.clone().or(file.get("data_dir")?),
            out_dir: pick(a.out_dir.clone(), file.get("out_dir")?, out_default),
            phantom: a.phantom || file.get("phantom")?.unwrap_or(false),
            phantom_count: pick(a.phantom_count, file.get("phantom_count")?, 259),
            fmap_cap: pick(a.fmap_cap, file.get("fmap_cap")?, 256),
            checkpoint_every: pick(a.checkpoint_every, file.get("checkpoint_every")?, 500),
            precision: pick(a.precision.clone(), file.get("precision")?, "f64".into()),
            resume: a.resume.clone(),
            model,
        })
    }
}

fn manifest_digest(dir: &Path) -> Result<String> {
    let manifest = dir.join("manifest.tsv");
    let bytes = std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_train<E: Scalar>(r: &ResolvedTrain) -> Result<()> {
    let model = ModelKind::parse(&r.model)?;
    let (records, data_tag): (Vec<SliceRecord<E>>, String) = if r.phantom {
        let params = PhantomParams::new(r.final_res, r.seed);
        let recs = phantom_generate::<E>(&params, r.phantom_count)?;
        let tag = format!(
            "phantom:n={};res={};seed={}",
            r.phantom_count, r.final_res, r.seed
        );
        (recs, tag)
    } else {
        let dir = r.data_dir.as_ref().ok_or_else(|| {
            Error::Config("data_dir is required unless --phantom is set".into())
        })?;
        let recs = load_manifest_dataset::<E>(dir, None)?;
        let tag = format!("dir:{};n={}", manifest_digest(dir)?, recs.len());
        (recs, tag)
    };

    let opts = TrainOptions {
        model,
        latent_dim: r.latent_dim,
        final_resolution: r.final_res,
        total_iterations: r.iters,
        batch_size: r.batch,
        learning_rate: r.lr,
        weights: r.weights,
        seed: r.seed,
        fmap_cap: r.fmap_cap,
        checkpoint_every: r.checkpoint_every,
        data_tag,
        ..TrainOptions::default()
    };
    let summary = run_training::<E>(&opts, records, &r.out_dir, r.resume.as_deref())?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_generate<E: Scalar>(a: &GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let g = load_network::<E>(&ck, NetworkRole::Generator)?;
    let samples = generate_samples(&g, a.count, a.seed)?;
    let res = g.resolution_active;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for k in 0..a.count {
        let img = samples.slice_axis(0, k, 1)?.reshape(&[1, res, res])?;
        write_pgm(&a.out_dir.join(format!("{k:05}.pgm")), &img)?;
    }
    println!("wrote {} images at {res}x{res} to {}", a.count, a.out_dir.display());
    Ok(())
}

fn load_eval_reals<E: Scalar>(a: &EvaluateArgs, resolution: usize) -> Result<Vec<Tensor<E>>> {
    let records: Vec<SliceRecord<E>> = if a.phantom {
        phantom_generate::<E>(&PhantomParams::new(resolution, a.seed), a.phantom_count)?
    } else {
        let dir = a.data_dir.as_ref().ok_or_else(|| {
            Error::Config("data_dir is required unless --phantom is set".into())
        })?;
        load_manifest_dataset::<E>(dir, None)?
    };
    records
        .iter()
        .map(|r| {
            let s = r.pixels.shape().to_vec();
            let img = r.pixels.reshape(&[1, 1, s[1], s[2]])?;
            downsample_to(&img, resolution)
        })
        .collect()
}

fn cmd_evaluate<E: Scalar>(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let g = load_network::<E>(&ck, NetworkRole::Generator)?;
    let model_id = checkpoint_model_kind(&ck)?.id();
    let resolution = g.resolution_active;
    let provider = EmbeddingProvider::parse(&a.provider)?;

    let reals = load_eval_reals::<E>(a, resolution)?;
    let latent = g.spec.latent_dim;

    let sample_one = |rng: &mut ChaCha8Rng| -> Result<Tensor<E>> {
        let z = Tensor::from_vec(&[1, latent], normal_vec::<E>(rng, latent))?;
        g.generator_forward(&g.params, &z)
    };

    let mut real_src = ImageSource::Set(&reals);
    let mut fid_sampler = sample_one;
    let mut fake_src = ImageSource::Sampler(&mut fid_sampler);
    let fid = fid_protocol(&mut real_src, &mut fake_src, &provider, a.fid_samples, a.seed)?;

    // SSIM operates on [0,1] pixels; the generator emits [-1,1].
    let mut ms_sampler = |rng: &mut ChaCha8Rng| to_unit_range(&sample_one(rng)?);
    let mut gen_src = ImageSource::Sampler(&mut ms_sampler);
    let ms_ssim = ms_ssim_protocol(&mut gen_src, a.msssim_pairs, a.seed, &SsimParams::default())?;

    let mut flags = Vec::new();
    if fid.clamped {
        flags.push("fid-clamped-negative".to_string());
    }
    if fid.with_replacement {
        flags.push("fid-sampled-with-replacement".to_string());
    }
    if fid.underdetermined {
        flags.push("fid-covariance-underdetermined".to_string());
    }

    let report = MetricReport {
        fid: fid.value,
        ms_ssim,
        pair_count_fid: a.fid_samples as u64,
        pair_count_msssim: a.msssim_pairs as u64,
        provider_id: provider.id(),
        seed: a.seed,
        model_id: model_id.to_string(),
        flags,
    };
    report.validate()?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    println!("{json}");

    // reports/ next to the checkpoint's directory unless overridden
    let reports_dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a
            .checkpoint
            .parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("reports"))
            .unwrap_or_else(|| PathBuf::from("reports")),
    };
    std::fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    let out = reports_dir.join(format!("metrics_seed{}.json", a.seed));
    std::fs::write(&out, json.as_bytes()).map_err(|e| Error::io(&out, e))?;
    Ok(())
}

fn cmd_convert<E: Scalar>(a: &ConvertArgs) -> Result<()> {
    let mut inputs: Vec<PathBuf> = std::fs::read_dir(&a.in_dir)
        .map_err(|e| Error::io(&a.in_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Data(format!(
            "no .pgm files found in {}",
            a.in_dir.display()
        )));
    }
    let mut records: Vec<SliceRecord<E>> = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slice".into());
        records.push(load_slice::<E>(path, &stem, a.slice_index, a.pad)?);
    }
    write_dataset(&a.out_dir, &records)?;
    println!("{}", a.out_dir.join("manifest.tsv").display());
    Ok(())
}

fn cmd_phantom_gen<E: Scalar>(a: &PhantomGenArgs) -> Result<()> {
    let params = PhantomParams::new(a.final_res, a.seed);
    let records = phantom_generate::<E>(&params, a.count)?;
    write_dataset(&a.out_dir, &records)?;
    println!("{}", a.out_dir.join("manifest.tsv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_args() -> TrainArgs {
        TrainArgs {
            model: None,
            latent_dim: None,
            final_res: None,
            iters: None,
            batch: None,
            lr: None,
            lambda1: None,
            lambda2: None,
            lambda_gp: None,
            lambda_ssim: None,
            seed: None,
            data_dir: None,
            out_dir: None,
            phantom: false,
            phantom_count: None,
            config: None,
            resume: None,
            fmap_cap: None,
            checkpoint_every: None,
            precision: None,
        }
    }

    fn with_config(contents: &str) -> (tempfile::TempDir, TrainArgs) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, contents).unwrap();
        let mut args = no_args();
        args.config = Some(path);
        (dir, args)
    }

    /// Each config field resolves as CLI flag > config file > built-in
    /// default. `set_flag` writes the flag-side value; `file_line` is the
    /// file-side assignment; the three probes read back the resolved value.
    fn check_field<T: PartialEq + std::fmt::Debug>(
        field: &str,
        file_line: &str,
        set_flag: impl Fn(&mut TrainArgs),
        resolve: impl Fn(&ResolvedTrain) -> T,
        expect_default: T,
        expect_file: T,
        expect_flag: T,
    ) {
        let bare = ResolvedTrain::from_args(&no_args()).unwrap();
        assert_eq!(resolve(&bare), expect_default, "{field}: default");

        let (_tmp, from_file) = with_config(file_line);
        let via_file = ResolvedTrain::from_args(&from_file).unwrap();
        assert_eq!(resolve(&via_file), expect_file, "{field}: file over default");

        let (_tmp2, mut both) = with_config(file_line);
        set_flag(&mut both);
        let via_flag = ResolvedTrain::from_args(&both).unwrap();
        assert_eq!(resolve(&via_flag), expect_flag, "{field}: flag over file");
    }

    #[test]
    fn precedence_is_flag_file_default_for_every_field() {
        check_field(
            "model",
            "model = pggan-ssim",
            |a| a.model = Some("alpha-gan-gp".into()),
            |r| r.model.clone(),
            "pggan".to_string(),
            "pggan-ssim".to_string(),
            "alpha-gan-gp".to_string(),
        );
        check_field(
            "latent_dim",
            "latent_dim = 32",
            |a| a.latent_dim = Some(16),
            |r| r.latent_dim,
            512,
            32,
            16,
        );
        check_field(
            "final_res",
            "final_res = 64",
            |a| a.final_res = Some(128),
            |r| r.final_res,
            256,
            64,
            128,
        );
        check_field("iters", "iters = 100", |a| a.iters = Some(200), |r| r.iters, 12000, 100, 200);
        check_field("batch", "batch = 8", |a| a.batch = Some(4), |r| r.batch, 32, 8, 4);
        check_field("lr", "lr = 0.01", |a| a.lr = Some(0.02), |r| r.lr, 1e-3, 0.01, 0.02);
        check_field(
            "lambda1",
            "lambda1 = 1.5",
            |a| a.lambda1 = Some(2.5),
            |r| r.weights.lambda1,
            10.0,
            1.5,
            2.5,
        );
        check_field(
            "lambda2",
            "lambda2 = 3.5",
            |a| a.lambda2 = Some(4.5),
            |r| r.weights.lambda2,
            10.0,
            3.5,
            4.5,
        );
        check_field(
            "lambda_gp",
            "lambda_gp = 5.5",
            |a| a.lambda_gp = Some(6.5),
            |r| r.weights.lambda_gp,
            10.0,
            5.5,
            6.5,
        );
        check_field(
            "lambda_ssim",
            "lambda_ssim = 7.5",
            |a| a.lambda_ssim = Some(8.5),
            |r| r.weights.lambda_ssim,
            10.0,
            7.5,
            8.5,
        );
        check_field("seed", "seed = 11", |a| a.seed = Some(22), |r| r.seed, 0, 11, 22);
        check_field(
            "data_dir",
            "data_dir = /fa",
            |a| a.data_dir = Some(PathBuf::from("/fb")),
            |r| r.data_dir.clone(),
            None,
            Some(PathBuf::from("/fa")),
            Some(PathBuf::from("/fb")),
        );
        check_field(
            "out_dir",
            "out_dir = /oa",
            |a| a.out_dir = Some(PathBuf::from("/ob")),
            |r| r.out_dir.clone(),
            PathBuf::from("runs/pggan-seed0"),
            PathBuf::from("/oa"),
            PathBuf::from("/ob"),
        );
        check_field(
            "phantom_count",
            "phantom_count = 10",
            |a| a.phantom_count = Some(20),
            |r| r.phantom_count,
            259,
            10,
            20,
        );
        check_field(
            "fmap_cap",
            "fmap_cap = 16",
            |a| a.fmap_cap = Some(24),
            |r| r.fmap_cap,
            256,
            16,
            24,
        );
        check_field(
            "checkpoint_every",
            "checkpoint_every = 100",
            |a| a.checkpoint_every = Some(200),
            |r| r.checkpoint_every,
            500,
            100,
            200,
        );
        check_field(
            "precision",
            "precision = f32",
            |a| a.precision = Some("f64".into()),
            |r| r.precision.clone(),
            "f64".to_string(),
            "f32".to_string(),
            "f64".to_string(),
        );

        // `phantom` is a presence flag: the flag or the file can switch it
        // on, and the file cannot switch it back off once the flag is given.
        let bare = ResolvedTrain::from_args(&no_args()).unwrap();
        assert!(!bare.phantom);
        let (_t, file_on) = with_config("phantom = true");
        assert!(ResolvedTrain::from_args(&file_on).unwrap().phantom);
        let mut flag_on = no_args();
        flag_on.phantom = true;
        assert!(ResolvedTrain::from_args(&flag_on).unwrap().phantom);
    }

    #[test]
    fn default_out_dir_tracks_resolved_model_and_seed() {
        let (_t, args) = with_config("model = pggan-ssim\nseed = 9");
        let r = ResolvedTrain::from_args(&args).unwrap();
        assert_eq!(r.out_dir, PathBuf::from("runs/pggan-ssim-seed9"));
    }

    #[test]
    fn config_file_comments_and_blank_lines_are_ignored() {
        let (_t, args) = with_config("# a comment\n\n  batch = 7  # trailing note\n\nseed=3\n");
        let r = ResolvedTrain::from_args(&args).unwrap();
        assert_eq!(r.batch, 7);
        assert_eq!(r.seed, 3);
    }

    #[test]
    fn config_file_rejects_unknown_fields_and_bad_values() {
        let (_t, args) = with_config("not_a_field = 1\n");
        let err = ResolvedTrain::from_args(&args).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("not_a_field")));

        let (_t2, args2) = with_config("batch = many\n");
        let err2 = ResolvedTrain::from_args(&args2).unwrap_err();
        assert!(matches!(err2, Error::Config(ref m) if m.contains("batch")));

        let (_t3, args3) = with_config("just a line without equals\n");
        let err3 = ResolvedTrain::from_args(&args3).unwrap_err();
        assert!(matches!(err3, Error::Config(ref m) if m.contains("key=value")));
    }
}
