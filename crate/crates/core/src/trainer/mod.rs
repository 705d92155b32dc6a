//! Training machinery: the progressive-growing phase schedule, a
//! bias-corrected Adam optimizer, one-iteration update steps for both
//! model families, and deterministic sample generation.
//!
//! Determinism contract: every random draw a step makes comes from a
//! child stream keyed by `(seed, purpose label, global_iter)`, and batch
//! selection is a pure function of the global step index. Nothing about
//! a run depends on iteration history, so resuming from a checkpoint at
//! step `k` replays exactly the same computation an uninterrupted run
//! performs.

pub mod checkpoint;
pub mod run;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    alpha_gan_d_loss, alpha_gan_e_loss, alpha_gan_g_loss, alpha_gan_latent_d_loss,
    gradient_penalty, ssim_diversity_loss, wgan_g_loss, LossWeights,
};
use crate::nn::{NetworkRole, NetworkState};
use crate::rng::{child_stream, normal_vec};
use crate::scalar::Scalar;
use crate::tensor::{grad, Tape, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use run::{run_training, DataSource, ModelKind, RunDirs, TrainOptions, TrainSummary};

pub const ADAM_EPS: f64 = 1e-8;
/// Progressive-growing convention: memoryless first moment, slow second.
pub const DEFAULT_ADAM_BETA1: f64 = 0.0;
pub const DEFAULT_ADAM_BETA2: f64 = 0.99;

/// Position within a resolution's life cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fade,
    Stabilize,
}

/// Where a given global iteration falls in the schedule.
///
/// `iter_in_phase` is the 1-based ordinal of the step being executed, so
/// the very first fade step already blends with `alpha = 1/fade_iters`
/// and the last fade step reaches exactly 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseState {
    pub resolution: usize,
    pub phase: Phase,
    pub iter_in_phase: u64,
    pub global_iter: u64,
    pub fade_alpha: f64,
}

/// Full iteration plan: which resolutions run, and for how long each
/// fades and stabilizes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub start_resolution: usize,
    pub final_resolution: usize,
    /// resolution → (fade iterations, stabilize iterations); the start
    /// resolution has no fade.
    pub iterations_per_phase: BTreeMap<usize, (u64, u64)>,
    pub total_iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

/// Plan the iteration budget: the total is divided evenly across the
/// resolution ladder; each resolution above the start splits its share
/// into equal fade/stabilize halves; the division remainder goes to the
/// final stabilize phase. Every planned phase must get at least 2
/// iterations.
#[allow(clippy::too_many_arguments)]
pub fn schedule_plan(
    final_resolution: usize,
    total_iterations: u64,
    batch_size: usize,
    learning_rate: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    seed: u64,
) -> Result<TrainSchedule> {
    const START: usize = 4;
    if final_resolution < START || !final_resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "final_resolution must be a power of two ≥ {START}, got {final_resolution}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be positive and finite, got {learning_rate}"
        )));
    }
    for (label, b) in [("adam_beta1", adam_beta1), ("adam_beta2", adam_beta2)] {
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Config(format!("{label} must be in [0, 1), got {b}")));
        }
    }

    let mut ladder = Vec::new();
    let mut r = START;
    while r <= final_resolution {
        ladder.push(r);
        r *= 2;
    }
    let n_res = ladder.len() as u64;
    let per_res = total_iterations / n_res;
    let remainder = total_iterations - per_res * n_res;

    let mut iterations_per_phase = BTreeMap::new();
    for (i, &res) in ladder.iter().enumerate() {
        let (fade, mut stabilize) = if res == START {
            (0, per_res)
        } else {
            (per_res / 2, per_res - per_res / 2)
        };
        if i + 1 == ladder.len() {
            stabilize += remainder;
        }
        if (res != START && fade < 2) || stabilize < 2 {
            return Err(Error::Config(format!(
                "iteration budget {total_iterations} is infeasible: resolution {res} \
                 would get fade {fade} / stabilize {stabilize} iterations (minimum 2 per phase)"
            )));
        }
        iterations_per_phase.insert(res, (fade, stabilize));
    }
    debug_assert_eq!(
        iterations_per_phase.values().map(|(f, s)| f + s).sum::<u64>(),
        total_iterations
    );

    Ok(TrainSchedule {
        start_resolution: START,
        final_resolution,
        iterations_per_phase,
        total_iterations,
        batch_size,
        learning_rate,
        adam_beta1,
        adam_beta2,
        seed,
    })
}

impl TrainSchedule {
    /// Ladder in ascending order.
    pub fn resolutions(&self) -> Vec<usize> {
        self.iterations_per_phase.keys().copied().collect()
    }

    /// Schedule position of an absolute step index (pure function, so a
    /// resumed run derives the same states as an uninterrupted one).
    pub fn phase_at(&self, global_iter: u64) -> Result<PhaseState> {
        if global_iter >= self.total_iterations {
            return Err(Error::Config(format!(
                "iteration {global_iter} is beyond the schedule ({} total)",
                self.total_iterations
            )));
        }
        let mut consumed = 0u64;
        for (&resolution, &(fade, stabilize)) in &self.iterations_per_phase {
            if global_iter < consumed + fade {
                let iter_in_phase = global_iter - consumed + 1;
                return Ok(PhaseState {
                    resolution,
                    phase: Phase::Fade,
                    iter_in_phase,
                    global_iter,
                    fade_alpha: (iter_in_phase as f64 / fade as f64).min(1.0),
                });
            }
            consumed += fade;
            if global_iter < consumed + stabilize {
                return Ok(PhaseState {
                    resolution,
                    phase: Phase::Stabilize,
                    iter_in_phase: global_iter - consumed + 1,
                    global_iter,
                    fade_alpha: 1.0,
                });
            }
            consumed += stabilize;
        }
        unreachable!("phase table sums to total_iterations");
    }
}

/// Per-parameter Adam accumulators. Moments are kept in f64 regardless of
/// the model precision so optimizer arithmetic is identical in both modes.
/// Slots are created lazily, which gives parameters added by a grow event
/// fresh moments and a fresh step count (full bias correction on their
/// first update).
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub slots: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// A non-finite gradient aborts before any parameter is touched.
pub fn adam_step<E: Scalar>(
    net: &mut NetworkState<E>,
    grads: &BTreeMap<String, Tensor<E>>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    for (name, g) in grads {
        let param = net
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("adam_step: unknown parameter {name}")))?;
        if param.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?} vs gradient {:?}", param.shape(), g.shape()),
            ));
        }
        for v in g.data().iter() {
            if !Scalar::to_f64(*v).is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
    }

    for (name, g) in grads {
        let (shape, pdata) = {
            let param = &net.params[name];
            (param.shape().to_vec(), param.to_vec())
        };
        let n = pdata.len();
        let slot = state.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        if slot.m.len() != n {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: moment length {} vs parameter {}", slot.m.len(), n),
            ));
        }
        slot.t += 1;
        let bc1 = 1.0 - b1.powi(slot.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(slot.t.min(i32::MAX as u64) as i32);
        let gdata = g.to_vec();
        let mut updated = Vec::with_capacity(n);
        for i in 0..n {
            let gi = Scalar::to_f64(gdata[i]);
            let m = b1 * slot.m[i] + (1.0 - b1) * gi;
            let v = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
            slot.m[i] = m;
            slot.v[i] = v;
            let m_hat = if bc1 == 0.0 { m } else { m / bc1 };
            let v_hat = v / bc2;
            updated.push(E::lit(
                Scalar::to_f64(pdata[i]) - lr * m_hat / (v_hat.sqrt() + eps),
            ));
        }
        net.set_param(name, Tensor::from_vec(&shape, updated)?)?;
    }
    Ok(())
}

/// Scalar losses reported by one two-player training step.
#[derive(Debug, Clone, Serialize)]
pub struct PgganStepReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_term: Option<f64>,
}

/// Scalar losses reported by one four-player training step.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaGanStepReport {
    pub g_loss: f64,
    pub e_loss: f64,
    pub d_loss: f64,
    pub latent_d_loss: f64,
}

fn ensure_finite(value: f64, what: &str, iter: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} became non-finite at iteration {iter}"
        )))
    }
}

fn param_grads<E: Scalar>(
    loss: &Tensor<E>,
    watched: &BTreeMap<String, Tensor<E>>,
) -> Result<BTreeMap<String, Tensor<E>>> {
    let names: Vec<&String> = watched.keys().collect();
    let tensors: Vec<Tensor<E>> = watched.values().cloned().collect();
    let gs = grad(loss, &tensors, false)?;
    Ok(names
        .into_iter()
        .zip(gs)
        .map(|(n, g)| (n.clone(), g.detach()))
        .collect())
}

fn sample_latents<E: Scalar>(
    seed: u64,
    label: &str,
    index: u64,
    n: usize,
    latent_dim: usize,
) -> Result<Tensor<E>> {
    let mut rng = child_stream(seed, label, index);
    Tensor::from_vec(&[n, latent_dim], normal_vec::<E>(&mut rng, n * latent_dim))
}

/// One alternating update of the two-player game: the critic first
/// (Wasserstein loss with gradient penalty), then the generator
/// (adversarial loss, plus the intra-batch similarity penalty when
/// `use_ssim` is set). `real` must already be at the phase resolution,
/// fade-blended by the caller.
#[allow(clippy::too_many_arguments)]
pub fn train_step_pggan<E: Scalar>(
    g: &mut NetworkState<E>,
    d: &mut NetworkState<E>,
    g_opt: &mut AdamState,
    d_opt: &mut AdamState,
    real: &Tensor<E>,
    ps: &PhaseState,
    weights: &LossWeights,
    use_ssim: bool,
    lr: f64,
    betas: (f64, f64),
    seed: u64,
) -> Result<PgganStepReport> {
    let rs = real.shape();
    if rs.len() != 4 || rs[1] != 1 || rs[2] != ps.resolution || rs[3] != ps.resolution {
        return Err(Error::shape(
            "train_step_pggan",
            format!("batch {rs:?} vs phase resolution {}", ps.resolution),
        ));
    }
    if g.resolution_active != ps.resolution || d.resolution_active != ps.resolution {
        return Err(Error::Config(format!(
            "network resolutions (G {}, D {}) do not match phase resolution {}",
            g.resolution_active, d.resolution_active, ps.resolution
        )));
    }
    let n = rs[0];
    g.fade_alpha = ps.fade_alpha;
    d.fade_alpha = ps.fade_alpha;
    let it = ps.global_iter;

    // Critic update: generator parameters stay constants.
    let (d_loss_v, gp_v, d_grads) = {
        let tape = Tape::new();
        let dp = d.watched(&tape);
        let z = sample_latents::<E>(seed, "latent-d", it, n, g.spec.latent_dim)?;
        let fake = g.generator_forward(&g.params, &z)?;
        let critic = |x: &Tensor<E>| d.discriminator_forward(&dp, x);

        let wasserstein = critic(&fake)?
            .mean_all()?
            .sub(&critic(real)?.mean_all()?)?;
        let (d_loss, gp_v) = if weights.lambda_gp != 0.0 {
            let mut gp_rng = child_stream(seed, "gp-u", it);
            let gp = gradient_penalty(&tape, &critic, real, &fake, &mut gp_rng)?;
            let gp_v = Scalar::to_f64(gp.item());
            (
                wasserstein.add(&gp.mul_const(E::lit(weights.lambda_gp))?)?,
                gp_v,
            )
        } else {
            (wasserstein, 0.0)
        };
        let d_loss_v = Scalar::to_f64(d_loss.item());
        ensure_finite(d_loss_v, "critic loss", it)?;
        (d_loss_v, gp_v, param_grads(&d_loss, &dp)?)
    };
    adam_step(d, &d_grads, d_opt, lr, betas, ADAM_EPS)?;

    // Generator update against the just-updated critic.
    let (g_loss_v, ssim_term, g_grads) = {
        let tape = Tape::new();
        let gpar = g.watched(&tape);
        let z = sample_latents::<E>(seed, "latent-g", it, n, g.spec.latent_dim)?;
        let fake = g.generator_forward(&gpar, &z)?;
        let critic = |x: &Tensor<E>| d.discriminator_forward(&d.params, x);
        let adv = wgan_g_loss(critic, &fake)?;
        // The structural-similarity window (11×11) does not fit below
        // 16×16, so the diversity term activates once the ladder reaches
        // a resolution that supports it.
        let ssim_active = use_ssim
            && ps.resolution >= crate::metrics::SsimParams::default().window_size;
        let (g_loss, ssim_term) = if ssim_active {
            let diversity = ssim_diversity_loss(&fake, weights)?;
            let v = Scalar::to_f64(diversity.item());
            (adv.add(&diversity)?, Some(v))
        } else {
            (adv, None)
        };
        let g_loss_v = Scalar::to_f64(g_loss.item());
        ensure_finite(g_loss_v, "generator loss", it)?;
        (g_loss_v, ssim_term, param_grads(&g_loss, &gpar)?)
    };
    adam_step(g, &g_grads, g_opt, lr, betas, ADAM_EPS)?;

    Ok(PgganStepReport {
        d_loss: d_loss_v,
        g_loss: g_loss_v,
        gp_value: gp_v,
        ssim_term,
    })
}

/// One round of the four-player game at fixed resolution. Update order:
/// image critic, latent critic, encoder, generator — each network gets
/// one Adam step from its own loss, with all forward passes recomputed
/// against current parameters so gradients stay attributable.
#[allow(clippy::too_many_arguments)]
pub fn train_step_alpha_gan<E: Scalar>(
    e_net: &mut NetworkState<E>,
    g_net: &mut NetworkState<E>,
    d_net: &mut NetworkState<E>,
    l_net: &mut NetworkState<E>,
    e_opt: &mut AdamState,
    g_opt: &mut AdamState,
    d_opt: &mut AdamState,
    l_opt: &mut AdamState,
    real: &Tensor<E>,
    weights: &LossWeights,
    lr: f64,
    betas: (f64, f64),
    seed: u64,
    global_iter: u64,
) -> Result<AlphaGanStepReport> {
    let rs = real.shape();
    let res = g_net.resolution_active;
    if rs.len() != 4 || rs[1] != 1 || rs[2] != res || rs[3] != res {
        return Err(Error::shape(
            "train_step_alpha_gan",
            format!("batch {rs:?} vs network resolution {res}"),
        ));
    }
    let n = rs[0];
    let it = global_iter;
    let z = sample_latents::<E>(seed, "latent", it, n, g_net.spec.latent_dim)?;

    // Image critic.
    let (d_loss_v, d_grads) = {
        let tape = Tape::new();
        let dp = d_net.watched(&tape);
        let z_hat = e_net.encoder_forward(&e_net.params, real)?;
        let x_recon = g_net.generator_forward(&g_net.params, &z_hat)?;
        let x_prior = g_net.generator_forward(&g_net.params, &z)?;
        let critic = |x: &Tensor<E>| d_net.discriminator_forward(&dp, x);
        let mut gp_rng = child_stream(seed, "gp-d", it);
        let loss = alpha_gan_d_loss(&tape, &critic, real, &x_recon, &x_prior, weights, &mut gp_rng)?;
        let v = Scalar::to_f64(loss.item());
        ensure_finite(v, "image-critic loss", it)?;
        (v, param_grads(&loss, &dp)?)
    };
    adam_step(d_net, &d_grads, d_opt, lr, betas, ADAM_EPS)?;

    // Latent critic.
    let (l_loss_v, l_grads) = {
        let tape = Tape::new();
        let lp = l_net.watched(&tape);
        let z_hat = e_net.encoder_forward(&e_net.params, real)?;
        let latent_critic = |v: &Tensor<E>| l_net.latent_discriminator_forward(&lp, v);
        let mut gp_rng = child_stream(seed, "gp-l", it);
        let loss = alpha_gan_latent_d_loss(&tape, &latent_critic, &z_hat, &z, weights, &mut gp_rng)?;
        let v = Scalar::to_f64(loss.item());
        ensure_finite(v, "latent-critic loss", it)?;
        (v, param_grads(&loss, &lp)?)
    };
    adam_step(l_net, &l_grads, l_opt, lr, betas, ADAM_EPS)?;

    // Encoder.
    let (e_loss_v, e_grads) = {
        let tape = Tape::new();
        let ep = e_net.watched(&tape);
        let encode = |x: &Tensor<E>| e_net.encoder_forward(&ep, x);
        let latent_critic = |v: &Tensor<E>| l_net.latent_discriminator_forward(&l_net.params, v);
        let loss = alpha_gan_e_loss(&encode, &latent_critic, real)?;
        let v = Scalar::to_f64(loss.item());
        ensure_finite(v, "encoder loss", it)?;
        (v, param_grads(&loss, &ep)?)
    };
    adam_step(e_net, &e_grads, e_opt, lr, betas, ADAM_EPS)?;

    // Generator.
    let (g_loss_v, g_grads) = {
        let tape = Tape::new();
        let gpar = g_net.watched(&tape);
        let encode = |x: &Tensor<E>| e_net.encoder_forward(&e_net.params, x);
        let generate = |v: &Tensor<E>| g_net.generator_forward(&gpar, v);
        let critic = |x: &Tensor<E>| d_net.discriminator_forward(&d_net.params, x);
        let loss = alpha_gan_g_loss(&encode, &generate, &critic, real, &z, weights)?;
        let v = Scalar::to_f64(loss.item());
        ensure_finite(v, "generator loss", it)?;
        (v, param_grads(&loss, &gpar)?)
    };
    adam_step(g_net, &g_grads, g_opt, lr, betas, ADAM_EPS)?;

    Ok(AlphaGanStepReport {
        g_loss: g_loss_v,
        e_loss: e_loss_v,
        d_loss: d_loss_v,
        latent_d_loss: l_loss_v,
    })
}

/// Draw `count` latents from a seeded unit normal and run the generator
/// at its active resolution. Output is `[count, 1, R, R]` in `[-1, 1]`.
/// Forward passes are chunked to bound peak memory.
pub fn generate_samples<E: Scalar>(
    g: &NetworkState<E>,
    count: usize,
    seed: u64,
) -> Result<Tensor<E>> {
    if g.spec.role != NetworkRole::Generator {
        return Err(Error::Config("generate_samples needs a generator".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let latent = g.spec.latent_dim;
    let mut rng = child_stream(seed, "sample-latents", 0);
    let all = normal_vec::<E>(&mut rng, count * latent);

    const CHUNK: usize = 32;
    let mut out: Option<Tensor<E>> = None;
    let mut offset = 0;
    while offset < count {
        let m = CHUNK.min(count - offset);
        let z = Tensor::from_vec(
            &[m, latent],
            all[offset * latent..(offset + m) * latent].to_vec(),
        )?;
        let imgs = g.generator_forward(&g.params, &z)?;
        out = Some(match out {
            None => imgs,
            Some(acc) => acc.concat(&imgs, 0)?,
        });
        offset += m;
    }
    Ok(out.expect("count > 0"))
}
