//! End-to-end training runs: run-directory layout, the real-image
//! pyramid, growth events, JSON-line logging, checkpoint packing and
//! restoring, and deterministic resume.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore as _;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::pgm::write_pgm;
use crate::data::{downsample_to, DatasetIterator, SliceRecord};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{fade_in_blend, NetworkRole, NetworkSpec, NetworkState};
use crate::rng::child_stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::{
    generate_samples, schedule_plan, train_step_alpha_gan, train_step_pggan, AdamSlot, AdamState,
    Phase, PhaseState, TrainSchedule,
};

/// Which objective a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Pggan,
    PgganSsim,
    AlphaGanGp,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "pggan" => Ok(ModelKind::Pggan),
            "pggan-ssim" => Ok(ModelKind::PgganSsim),
            "alpha-gan-gp" => Ok(ModelKind::AlphaGanGp),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected pggan, pggan-ssim, or alpha-gan-gp)"
            ))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Pggan => "pggan",
            ModelKind::PgganSsim => "pggan-ssim",
            ModelKind::AlphaGanGp => "alpha-gan-gp",
        }
    }

    /// Progressive models grow through the resolution ladder; the
    /// adversarial autoencoder trains at a fixed resolution.
    pub fn progressive(self) -> bool {
        !matches!(self, ModelKind::AlphaGanGp)
    }
}

/// Everything that defines a training run's semantics (hashed into the
/// checkpoint so resume refuses a mismatched configuration).
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub final_resolution: usize,
    pub total_iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub fmap_cap: usize,
    pub checkpoint_every: u64,
    /// Identifies the dataset fed to the run (directory fingerprint or
    /// phantom recipe), so a checkpoint cannot silently resume onto
    /// different data.
    pub data_tag: String,
}

impl Default for TrainOptions {
    fn default() -> TrainOptions {
        TrainOptions {
            model: ModelKind::Pggan,
            latent_dim: 512,
            final_resolution: 256,
            total_iterations: 12000,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: super::DEFAULT_ADAM_BETA1,
            adam_beta2: super::DEFAULT_ADAM_BETA2,
            weights: LossWeights::default(),
            seed: 0,
            fmap_cap: 256,
            checkpoint_every: 500,
            data_tag: String::new(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.final_resolution < 4 || !self.final_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "final_resolution must be a power of two ≥ 4, got {}",
                self.final_resolution
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model == ModelKind::PgganSsim && self.batch_size < 2 {
            return Err(Error::Config(
                "the similarity-regularized model needs batch_size ≥ 2".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (label, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{label} must be in [0, 1), got {b}")));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical rendering of every semantic field plus
    /// the element precision.
    pub fn config_hash<E: Scalar>(&self) -> [u8; 32] {
        let canonical = format!(
            "model={};latent_dim={};final_resolution={};total_iterations={};batch_size={};\
             learning_rate={};adam_beta1={};adam_beta2={};lambda1={};lambda2={};lambda_gp={};\
             lambda_ssim={};seed={};fmap_cap={};data={};precision={:?}",
            self.model.id(),
            self.latent_dim,
            self.final_resolution,
            self.total_iterations,
            self.batch_size,
            self.learning_rate,
            self.adam_beta1,
            self.adam_beta2,
            self.weights.lambda1,
            self.weights.lambda2,
            self.weights.lambda_gp,
            self.weights.lambda_ssim,
            self.seed,
            self.fmap_cap,
            self.data_tag,
            E::DTYPE,
        );
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher.finalize().into()
    }
}

/// Run-directory layout, created on first use.
#[derive(Clone, Debug)]
pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl RunDirs {
    pub fn create(root: &Path) -> Result<RunDirs> {
        let dirs = RunDirs {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            samples: root.join("samples"),
            logs: root.join("logs"),
            reports: root.join("reports"),
        };
        for d in [&dirs.checkpoints, &dirs.samples, &dirs.logs, &dirs.reports] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(dirs)
    }
}

/// How a run obtains its training images.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Load a converted dataset (manifest + image files) from a directory.
    Directory(PathBuf),
    /// Generate a seeded synthetic dataset in memory.
    Phantom { count: usize, seed: u64 },
}

/// Outcome of a completed run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub final_checkpoint: PathBuf,
    pub checkpoints_written: usize,
    pub final_resolution: usize,
}

#[derive(Serialize)]
struct PgganLogLine<'a> {
    iter: u64,
    resolution: usize,
    phase: Phase,
    alpha: f64,
    #[serde(flatten)]
    report: &'a super::PgganStepReport,
}

#[derive(Serialize)]
struct AlphaGanLogLine<'a> {
    iter: u64,
    resolution: usize,
    #[serde(flatten)]
    report: &'a super::AlphaGanStepReport,
}

/// Real batch for the active phase: average-pool the base batch down to
/// the phase resolution; during a fade, blend with the twice-pooled,
/// re-upsampled version using the same alpha as the networks, so the
/// critic's input distribution tracks the generator's output pathway.
pub fn real_batch_for_phase<E: Scalar>(base: &Tensor<E>, ps: &PhaseState) -> Result<Tensor<E>> {
    let high = downsample_to(base, ps.resolution)?;
    if ps.phase == Phase::Fade && ps.fade_alpha < 1.0 {
        let low = downsample_to(base, ps.resolution / 2)?.upsample2x()?;
        fade_in_blend(&low, &high, ps.fade_alpha)
    } else {
        Ok(high)
    }
}

fn put_network<E: Scalar>(ck: &mut Checkpoint, net: &NetworkState<E>) {
    let key = net.spec.role.key();
    ck.put_u64s(&format!("net.{key}.resolution"), &[net.resolution_active as u64]);
    ck.put_u64s(&format!("net.{key}.latent_dim"), &[net.spec.latent_dim as u64]);
    ck.put_u64s(
        &format!("net.{key}.max_resolution"),
        &[net.spec.max_resolution as u64],
    );
    ck.put_u64s(&format!("net.{key}.fmap_cap"), &[net.spec.fmap_cap as u64]);
    ck.put_u64s(&format!("net.{key}.seed"), &[net.init_seed]);
    ck.put_f64s(&format!("net.{key}.fade_alpha"), &[net.fade_alpha]);
    for (name, t) in &net.params {
        ck.put_tensor(&format!("param.{name}"), t);
    }
}

fn put_adam(ck: &mut Checkpoint, state: &AdamState) {
    for (pname, slot) in &state.slots {
        ck.put_f64s(&format!("adam.{pname}.m"), &slot.m);
        ck.put_f64s(&format!("adam.{pname}.v"), &slot.v);
        ck.put_u64s(&format!("adam.{pname}.t"), &[slot.t]);
    }
}

/// Rebuild one network from a checkpoint: its architecture fields, its
/// reached resolution, its fade position, and every parameter tensor.
pub fn load_network<E: Scalar>(ck: &Checkpoint, role: NetworkRole) -> Result<NetworkState<E>> {
    let key = role.key();
    let resolution = ck.get_u64(&format!("net.{key}.resolution"))? as usize;
    let latent_dim = ck.get_u64(&format!("net.{key}.latent_dim"))? as usize;
    let max_resolution = ck.get_u64(&format!("net.{key}.max_resolution"))? as usize;
    let fmap_cap = ck.get_u64(&format!("net.{key}.fmap_cap"))? as usize;
    let seed = ck.get_u64(&format!("net.{key}.seed"))?;
    let spec = NetworkSpec::new(role, latent_dim, max_resolution).with_fmap_cap(fmap_cap);
    let mut net = NetworkState::<E>::build(&spec, seed, resolution)?;
    net.fade_alpha = ck.get_f64(&format!("net.{key}.fade_alpha"))?;
    let names: Vec<String> = net.params.keys().cloned().collect();
    for name in names {
        let t = ck.get_tensor::<E>(&format!("param.{name}"))?;
        net.set_param(&name, t)?;
    }
    Ok(net)
}

fn load_adam<E: Scalar>(ck: &Checkpoint, net: &NetworkState<E>) -> Result<AdamState> {
    let mut state = AdamState::new();
    for name in net.params.keys() {
        let mkey = format!("adam.{name}.m");
        if !ck.entries.contains_key(&mkey) {
            continue; // parameter not yet updated when the checkpoint was cut
        }
        state.slots.insert(
            name.clone(),
            AdamSlot {
                m: ck.get_f64s(&mkey)?,
                v: ck.get_f64s(&format!("adam.{name}.v"))?,
                t: ck.get_u64(&format!("adam.{name}.t"))?,
            },
        );
    }
    Ok(state)
}

/// Stored model kind, so downstream commands can label reports.
pub fn checkpoint_model_kind(ck: &Checkpoint) -> Result<ModelKind> {
    let idx = ck.get_u64("meta.model")?;
    match idx {
        0 => Ok(ModelKind::Pggan),
        1 => Ok(ModelKind::PgganSsim),
        2 => Ok(ModelKind::AlphaGanGp),
        other => Err(Error::Config(format!("unknown model index {other}"))),
    }
}

fn model_index(kind: ModelKind) -> u64 {
    match kind {
        ModelKind::Pggan => 0,
        ModelKind::PgganSsim => 1,
        ModelKind::AlphaGanGp => 2,
    }
}

/// Tile `[K, 1, R, R]` samples row-major into an `[1, rows·R, cols·R]`
/// mosaic (values pass through untouched).
pub fn tile_grid<E: Scalar>(samples: &Tensor<E>, rows: usize, cols: usize) -> Result<Tensor<E>> {
    let s = samples.shape();
    if s.len() != 4 || s[1] != 1 || s[0] < rows * cols {
        return Err(Error::shape(
            "tile_grid",
            format!("need [≥{}, 1, R, R], got {s:?}", rows * cols),
        ));
    }
    let r = s[2];
    let c = s[3];
    let data = samples.data();
    let mut grid = vec![E::lit(0.0); rows * r * cols * c];
    let grid_w = cols * c;
    for tile in 0..rows * cols {
        let (ty, tx) = (tile / cols, tile % cols);
        for y in 0..r {
            for x in 0..c {
                grid[(ty * r + y) * grid_w + tx * c + x] = data[tile * r * c + y * c + x];
            }
        }
    }
    Tensor::from_vec(&[1, rows * r, grid_w], grid)
}

struct RunContext<'a, E: Scalar> {
    opts: &'a TrainOptions,
    dirs: RunDirs,
    hash: [u8; 32],
    log: std::io::BufWriter<std::fs::File>,
    records: Vec<SliceRecord<E>>,
    checkpoints_written: usize,
    last_checkpoint: Option<PathBuf>,
}

impl<'a, E: Scalar> RunContext<'a, E> {
    fn open(opts: &'a TrainOptions, records: Vec<SliceRecord<E>>, out_dir: &Path) -> Result<Self> {
        opts.validate()?;
        if records.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let base = records[0].pixels.shape().to_vec();
        if base.len() != 3 || base[1] != base[2] || !base[1].is_power_of_two() {
            return Err(Error::Data(format!(
                "training images must be square power-of-two extents, got {base:?}"
            )));
        }
        if base[1] < opts.final_resolution {
            return Err(Error::Data(format!(
                "data extent {} is below the final resolution {}",
                base[1], opts.final_resolution
            )));
        }
        if opts.batch_size > records.len() {
            return Err(Error::Data(format!(
                "batch size {} exceeds the {} available records",
                opts.batch_size,
                records.len()
            )));
        }
        let dirs = RunDirs::create(out_dir)?;
        let log_path = dirs.logs.join("train.jsonl");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(RunContext {
            opts,
            dirs,
            hash: opts.config_hash::<E>(),
            log: std::io::BufWriter::new(file),
            records,
            checkpoints_written: 0,
            last_checkpoint: None,
        })
    }

    fn log_line<T: Serialize>(&mut self, line: &T) -> Result<()> {
        let path = self.dirs.logs.join("train.jsonl");
        let text = serde_json::to_string(line)
            .map_err(|e| Error::Config(format!("log serialization failed: {e}")))?;
        writeln!(self.log, "{text}").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let path = self.dirs.logs.join("train.jsonl");
        self.log.flush().map_err(|e| Error::io(&path, e))
    }

    /// Write the checkpoint for the state after `done` iterations, plus
    /// an 8×8 sample mosaic from the current generator.
    fn save_checkpoint(
        &mut self,
        done: u64,
        nets: &[&NetworkState<E>],
        opts_states: &[&AdamState],
        generator: &NetworkState<E>,
    ) -> Result<PathBuf> {
        let mut ck = Checkpoint::new(self.hash);
        ck.put_u64s("meta.next_iter", &[done]);
        ck.put_u64s("meta.model", &[model_index(self.opts.model)]);
        for net in nets {
            put_network(&mut ck, net);
        }
        for st in opts_states {
            put_adam(&mut ck, st);
        }
        let path = self.dirs.checkpoints.join(format!("ckpt_{done:07}.pglb"));
        ck.save(&path)?;

        let grid_seed = child_stream(self.opts.seed, "sample-grid", done).next_u64();
        let count = 8 * 8;
        let samples = generate_samples(generator, count, grid_seed)?;
        let mosaic = tile_grid(&samples, 8, 8)?;
        let grid_path = self.dirs.samples.join(format!("grid_{done:07}.pgm"));
        write_pgm(&grid_path, &mosaic)?;

        self.checkpoints_written += 1;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }
}

/// Train from scratch or resume, writing checkpoints, sample mosaics,
/// and a JSON-line log under `out_dir`. Returns once the schedule is
/// exhausted; a non-finite loss aborts with the last checkpoint retained.
pub fn run_training<E: Scalar>(
    opts: &TrainOptions,
    records: Vec<SliceRecord<E>>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    let mut ctx = RunContext::open(opts, records, out_dir)?;

    let resumed = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != ctx.hash {
                return Err(Error::Config(
                    "resume refused: checkpoint was written under a different configuration"
                        .into(),
                ));
            }
            // A resume that has no iterations left still has a final
            // checkpoint: the one it started from.
            ctx.last_checkpoint = Some(path.to_path_buf());
            Some(ck)
        }
        None => None,
    };

    match opts.model {
        ModelKind::Pggan | ModelKind::PgganSsim => run_progressive(&mut ctx, resumed),
        ModelKind::AlphaGanGp => run_fixed(&mut ctx, resumed),
    }
}

fn run_progressive<E: Scalar>(
    ctx: &mut RunContext<'_, E>,
    resumed: Option<Checkpoint>,
) -> Result<TrainSummary> {
    let opts = ctx.opts;
    let schedule: TrainSchedule = schedule_plan(
        opts.final_resolution,
        opts.total_iterations,
        opts.batch_size,
        opts.learning_rate,
        opts.adam_beta1,
        opts.adam_beta2,
        opts.seed,
    )?;

    let g_spec = NetworkSpec::new(NetworkRole::Generator, opts.latent_dim, opts.final_resolution)
        .with_fmap_cap(opts.fmap_cap);
    let d_spec = NetworkSpec::new(
        NetworkRole::Discriminator,
        opts.latent_dim,
        opts.final_resolution,
    )
    .with_fmap_cap(opts.fmap_cap);

    let (mut g, mut d, mut g_opt, mut d_opt, start_iter) = match resumed {
        Some(ck) => {
            let g = load_network::<E>(&ck, NetworkRole::Generator)?;
            let d = load_network::<E>(&ck, NetworkRole::Discriminator)?;
            let g_opt = load_adam(&ck, &g)?;
            let d_opt = load_adam(&ck, &d)?;
            let next = ck.get_u64("meta.next_iter")?;
            (g, d, g_opt, d_opt, next)
        }
        None => (
            NetworkState::<E>::build(&g_spec, opts.seed, schedule.start_resolution)?,
            NetworkState::<E>::build(&d_spec, opts.seed, schedule.start_resolution)?,
            AdamState::new(),
            AdamState::new(),
            0,
        ),
    };

    let use_ssim = opts.model == ModelKind::PgganSsim;
    let records = std::mem::take(&mut ctx.records);
    let mut data = DatasetIterator::new(&records, opts.batch_size, opts.seed)?;

    for it in start_iter..opts.total_iterations {
        let ps = schedule.phase_at(it)?;
        if ps.resolution > g.resolution_active {
            g.grow(ps.resolution)?;
            d.grow(ps.resolution)?;
        }
        let base = data.batch_at_step(it)?;
        let real = real_batch_for_phase(&base, &ps)?;
        let report = train_step_pggan(
            &mut g,
            &mut d,
            &mut g_opt,
            &mut d_opt,
            &real,
            &ps,
            &opts.weights,
            use_ssim,
            opts.learning_rate,
            (opts.adam_beta1, opts.adam_beta2),
            opts.seed,
        )?;
        ctx.log_line(&PgganLogLine {
            iter: it,
            resolution: ps.resolution,
            phase: ps.phase,
            alpha: ps.fade_alpha,
            report: &report,
        })?;

        let done = it + 1;
        if done % opts.checkpoint_every == 0 || done == opts.total_iterations {
            ctx.flush()?;
            ctx.save_checkpoint(done, &[&g, &d], &[&g_opt, &d_opt], &g)?;
        }
    }
    ctx.flush()?;

    Ok(TrainSummary {
        iterations_run: opts.total_iterations - start_iter,
        final_checkpoint: ctx
            .last_checkpoint
            .clone()
            .ok_or_else(|| Error::Config("run finished without writing a checkpoint".into()))?,
        checkpoints_written: ctx.checkpoints_written,
        final_resolution: g.resolution_active,
    })
}

fn run_fixed<E: Scalar>(
    ctx: &mut RunContext<'_, E>,
    resumed: Option<Checkpoint>,
) -> Result<TrainSummary> {
    let opts = ctx.opts;
    let res = opts.final_resolution;
    let specs = [
        NetworkSpec::new(NetworkRole::Encoder, opts.latent_dim, res),
        NetworkSpec::new(NetworkRole::Generator, opts.latent_dim, res),
        NetworkSpec::new(NetworkRole::Discriminator, opts.latent_dim, res),
        NetworkSpec::new(NetworkRole::LatentDiscriminator, opts.latent_dim, res),
    ]
    .map(|s| s.with_fmap_cap(opts.fmap_cap));

    let (mut e, mut g, mut d, mut l, mut opt_e, mut opt_g, mut opt_d, mut opt_l, start_iter) =
        match resumed {
            Some(ck) => {
                let e = load_network::<E>(&ck, NetworkRole::Encoder)?;
                let g = load_network::<E>(&ck, NetworkRole::Generator)?;
                let d = load_network::<E>(&ck, NetworkRole::Discriminator)?;
                let l = load_network::<E>(&ck, NetworkRole::LatentDiscriminator)?;
                let (oe, og, od, ol) = (
                    load_adam(&ck, &e)?,
                    load_adam(&ck, &g)?,
                    load_adam(&ck, &d)?,
                    load_adam(&ck, &l)?,
                );
                let next = ck.get_u64("meta.next_iter")?;
                (e, g, d, l, oe, og, od, ol, next)
            }
            None => (
                NetworkState::<E>::build(&specs[0], opts.seed, res)?,
                NetworkState::<E>::build(&specs[1], opts.seed, res)?,
                NetworkState::<E>::build(&specs[2], opts.seed, res)?,
                NetworkState::<E>::build(&specs[3], opts.seed, res)?,
                AdamState::new(),
                AdamState::new(),
                AdamState::new(),
                AdamState::new(),
                0,
            ),
        };

    let records = std::mem::take(&mut ctx.records);
    let mut data = DatasetIterator::new(&records, opts.batch_size, opts.seed)?;

    for it in start_iter..opts.total_iterations {
        let base = data.batch_at_step(it)?;
        let real = downsample_to(&base, res)?;
        let report = train_step_alpha_gan(
            &mut e,
            &mut g,
            &mut d,
            &mut l,
            &mut opt_e,
            &mut opt_g,
            &mut opt_d,
            &mut opt_l,
            &real,
            &opts.weights,
            opts.learning_rate,
            (opts.adam_beta1, opts.adam_beta2),
            opts.seed,
            it,
        )?;
        ctx.log_line(&AlphaGanLogLine {
            iter: it,
            resolution: res,
            report: &report,
        })?;

        let done = it + 1;
        if done % opts.checkpoint_every == 0 || done == opts.total_iterations {
            ctx.flush()?;
            ctx.save_checkpoint(done, &[&e, &g, &d, &l], &[&opt_e, &opt_g, &opt_d, &opt_l], &g)?;
        }
    }
    ctx.flush()?;

    Ok(TrainSummary {
        iterations_run: opts.total_iterations - start_iter,
        final_checkpoint: ctx
            .last_checkpoint
            .clone()
            .ok_or_else(|| Error::Config("run finished without writing a checkpoint".into()))?,
        checkpoints_written: ctx.checkpoints_written,
        final_resolution: res,
    })
}
