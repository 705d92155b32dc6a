//! Training objectives: WGAN critic/generator losses with gradient
//! penalty, the four-player adversarial-autoencoder losses (generator,
//! encoder, image discriminator, latent discriminator), and the intra-batch
//! SSIM diversity term.
//!
//! Every loss is a scalar tensor built from recorded ops, so it is
//! differentiable end to end; the gradient penalty differentiates through
//! an inner gradient (double backprop).

use rand::RngCore;

use crate::error::{Error, Result};
use crate::metrics::ssim::{ssim, to_unit_range, SsimParams};
use crate::rng::uniform01;
use crate::scalar::Scalar;
use crate::tensor::{grad, Tape, Tensor};

/// Scalar weights of the composite objectives.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// L1 reconstruction weight (adversarial-autoencoder generator).
    pub lambda1: f64,
    /// Gradient-penalty weight of the adversarial-autoencoder critics.
    pub lambda2: f64,
    /// Gradient-penalty weight of the progressive-GAN critic.
    pub lambda_gp: f64,
    /// Weight of the SSIM diversity term.
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 10.0,
            lambda_gp: 10.0,
            lambda_ssim: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_gp", self.lambda_gp),
            ("lambda_ssim", self.lambda_ssim),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Keeps the per-sample gradient norm differentiable at an exactly-zero
/// gradient; the bias it adds to the penalty is far below every tolerance
/// used here (sqrt(1e-24) = 1e-12).
const GP_NORM_EPS: f64 = 1e-24;

/// Gradient penalty `mean((‖∇_x̂ critic(x̂)‖₂ − 1)²)` over per-sample
/// interpolates `x̂ = u·real + (1−u)·fake`, `u ~ U[0,1]` drawn per sample.
/// The inner gradient is taken with graph construction enabled, so the
/// result is differentiable with respect to the critic's parameters.
pub fn gradient_penalty<E, D>(
    tape: &Tape<E>,
    critic: D,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    rng: &mut impl RngCore,
) -> Result<Tensor<E>>
where
    E: Scalar,
    D: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    if real.shape() != fake.shape() {
        return Err(Error::shape(
            "gradient_penalty",
            format!("{:?} vs {:?}", real.shape(), fake.shape()),
        ));
    }
    let shape = real.shape().to_vec();
    if shape.is_empty() || shape[0] == 0 {
        return Err(Error::InvalidArgument(
            "gradient penalty needs a non-empty batch".into(),
        ));
    }
    let n = shape[0];
    let non_batch: Vec<usize> = (1..shape.len()).collect();
    let extents: Vec<usize> = shape[1..].to_vec();

    let u: Vec<E> = (0..n).map(|_| uniform01(rng)).collect();
    let u = Tensor::from_vec(&[n], u)?.broadcast_axes(&non_batch, &extents)?;
    let complement = u.neg()?.add_const(E::lit(1.0))?;
    let mix = real
        .detach()
        .mul(&u)?
        .add(&fake.detach().mul(&complement)?)?;
    let xhat = tape.watch(&mix);

    let scores = critic(&xhat)?;
    let total = scores.sum_all()?;
    let g = grad(&total, std::slice::from_ref(&xhat), true)?.swap_remove(0);

    let sum_sq = g.square()?.sum_axes(&non_batch)?;
    let norm = sum_sq.add_const(E::lit(GP_NORM_EPS))?.sqrt()?;
    norm.add_const(E::lit(-1.0))?.square()?.mean_all()
}

/// Wasserstein critic loss with gradient penalty:
/// `mean(critic(fake)) − mean(critic(real)) + lambda_gp · GP`.
/// `fake` is detached here; generator gradients come from
/// [`wgan_g_loss`].
pub fn wgan_d_loss<E, D>(
    tape: &Tape<E>,
    critic: D,
    real: &Tensor<E>,
    fake: &Tensor<E>,
    weights: &LossWeights,
    rng: &mut impl RngCore,
) -> Result<Tensor<E>>
where
    E: Scalar,
    D: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let fake = fake.detach();
    let loss = critic(&fake)?
        .mean_all()?
        .sub(&critic(real)?.mean_all()?)?;
    if weights.lambda_gp == 0.0 {
        return Ok(loss);
    }
    let gp = gradient_penalty(tape, &critic, real, &fake, rng)?;
    loss.add(&gp.mul_const(E::lit(weights.lambda_gp))?)
}

/// Wasserstein generator loss `−mean(critic(fake))`; `fake` stays live so
/// gradients reach the generator.
pub fn wgan_g_loss<E, D>(critic: D, fake: &Tensor<E>) -> Result<Tensor<E>>
where
    E: Scalar,
    D: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    critic(fake)?.mean_all()?.neg()
}

/// Adversarial-autoencoder generator loss:
/// `−mean(D(G(E(x)))) − mean(D(G(z))) + lambda1 · mean|x − G(E(x))|`.
/// The reconstruction term is a mean absolute error, keeping `lambda1`
/// comparable across resolutions.
pub fn alpha_gan_g_loss<E, Enc, Gen, Critic>(
    encode: Enc,
    generate: Gen,
    critic: Critic,
    real: &Tensor<E>,
    z: &Tensor<E>,
    weights: &LossWeights,
) -> Result<Tensor<E>>
where
    E: Scalar,
    Enc: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    Gen: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    Critic: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let z_hat = encode(real)?;
    if z_hat.shape() != z.shape() {
        return Err(Error::shape(
            "alpha_gan_g_loss",
            format!(
                "encoder output {:?} does not match latent {:?}",
                z_hat.shape(),
                z.shape()
            ),
        ));
    }
    let recon = generate(&z_hat)?;
    let from_z = generate(z)?;
    let adv = critic(&recon)?
        .mean_all()?
        .add(&critic(&from_z)?.mean_all()?)?
        .neg()?;
    let l1 = recon.sub(&real.detach())?.abs()?.mean_all()?;
    adv.add(&l1.mul_const(E::lit(weights.lambda1))?)
}

/// Adversarial-autoencoder encoder loss `−mean(D_L(E(x)))`: the encoder
/// is pushed to make its codes look like prior noise to the latent critic.
pub fn alpha_gan_e_loss<E, Enc, Critic>(
    encode: Enc,
    latent_critic: Critic,
    real: &Tensor<E>,
) -> Result<Tensor<E>>
where
    E: Scalar,
    Enc: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    Critic: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    latent_critic(&encode(real)?)?.mean_all()?.neg()
}

/// Adversarial-autoencoder image-critic loss:
/// `mean(D(fake_recon)) + mean(D(fake_z)) − 2·mean(D(real)) + lambda2·GP`,
/// with the gradient penalty computed once per fake source (each
/// interpolated against the real batch) and averaged.
pub fn alpha_gan_d_loss<E, Critic>(
    tape: &Tape<E>,
    critic: Critic,
    real: &Tensor<E>,
    fake_recon: &Tensor<E>,
    fake_z: &Tensor<E>,
    weights: &LossWeights,
    rng: &mut impl RngCore,
) -> Result<Tensor<E>>
where
    E: Scalar,
    Critic: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let fake_recon = fake_recon.detach();
    let fake_z = fake_z.detach();
    let mut loss = critic(&fake_recon)?
        .mean_all()?
        .add(&critic(&fake_z)?.mean_all()?)?
        .sub(&critic(real)?.mean_all()?.mul_const(E::lit(2.0))?)?;
    if weights.lambda2 != 0.0 {
        let gp_recon = gradient_penalty(tape, &critic, real, &fake_recon, rng)?;
        let gp_z = gradient_penalty(tape, &critic, real, &fake_z, rng)?;
        let gp = gp_recon.add(&gp_z)?.mul_const(E::lit(0.5))?;
        loss = loss.add(&gp.mul_const(E::lit(weights.lambda2))?)?;
    }
    Ok(loss)
}

/// Adversarial-autoencoder latent-critic loss:
/// `mean(D_L(ẑ)) − mean(D_L(z)) + lambda2·GP`, where the penalty
/// interpolates between encodings and prior noise samples.
pub fn alpha_gan_latent_d_loss<E, Critic>(
    tape: &Tape<E>,
    latent_critic: Critic,
    z_hat: &Tensor<E>,
    z: &Tensor<E>,
    weights: &LossWeights,
    rng: &mut impl RngCore,
) -> Result<Tensor<E>>
where
    E: Scalar,
    Critic: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let z_hat = z_hat.detach();
    let mut loss = latent_critic(&z_hat)?
        .mean_all()?
        .sub(&latent_critic(z)?.mean_all()?)?;
    if weights.lambda2 != 0.0 {
        let gp = gradient_penalty(tape, &latent_critic, &z_hat, z, rng)?;
        loss = loss.add(&gp.mul_const(E::lit(weights.lambda2))?)?;
    }
    Ok(loss)
}

/// The four adversarial-autoencoder losses evaluated together from one set
/// of forward passes (convenience for inspection and tests; training steps
/// recompute each loss against current parameters in sequence).
pub struct AlphaGanLosses<E: Scalar> {
    pub generator: Tensor<E>,
    pub encoder: Tensor<E>,
    pub discriminator: Tensor<E>,
    pub latent_discriminator: Tensor<E>,
}

#[allow(clippy::too_many_arguments)]
pub fn alpha_gan_losses<E, Enc, Gen, CriticD, CriticL>(
    tape: &Tape<E>,
    encode: Enc,
    generate: Gen,
    critic: CriticD,
    latent_critic: CriticL,
    real: &Tensor<E>,
    z: &Tensor<E>,
    weights: &LossWeights,
    rng: &mut impl RngCore,
) -> Result<AlphaGanLosses<E>>
where
    E: Scalar,
    Enc: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    Gen: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    CriticD: Fn(&Tensor<E>) -> Result<Tensor<E>>,
    CriticL: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    weights.validate()?;
    let z_hat = encode(real)?;
    if z_hat.shape() != z.shape() {
        return Err(Error::shape(
            "alpha_gan_losses",
            format!(
                "encoder output {:?} does not match latent {:?}",
                z_hat.shape(),
                z.shape()
            ),
        ));
    }
    let recon = generate(&z_hat)?;
    let from_z = generate(z)?;
    let generator = alpha_gan_g_loss(&encode, &generate, &critic, real, z, weights)?;
    let encoder = alpha_gan_e_loss(&encode, &latent_critic, real)?;
    let discriminator =
        alpha_gan_d_loss(tape, &critic, real, &recon, &from_z, weights, rng)?;
    let latent_discriminator =
        alpha_gan_latent_d_loss(tape, &latent_critic, &z_hat, z, weights, rng)?;
    Ok(AlphaGanLosses {
        generator,
        encoder,
        discriminator,
        latent_discriminator,
    })
}

/// SSIM diversity term: `lambda_ssim · mean over unordered pairs (i<j) of
/// SSIM(batch_i, batch_j)` on images remapped from `[-1,1]` to `[0,1]`.
/// Minimizing it pushes the generator toward more diverse batches.
pub fn ssim_diversity_loss<E: Scalar>(
    batch: &Tensor<E>,
    weights: &LossWeights,
) -> Result<Tensor<E>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(
            "ssim_diversity_loss",
            format!("expected [N,1,H,W], got {:?}", s),
        ));
    }
    let n = s[0];
    if n < 2 {
        return Err(Error::InvalidArgument(
            "ssim diversity needs a batch of at least 2".into(),
        ));
    }
    let unit = to_unit_range(batch)?;
    // Stack every unordered pair along the batch axis; the SSIM mean over
    // that stacked batch is exactly the mean over pairs.
    let mut xs: Option<Tensor<E>> = None;
    let mut ys: Option<Tensor<E>> = None;
    for i in 0..n {
        let xi = unit.slice_axis(0, i, 1)?;
        for j in (i + 1)..n {
            let yj = unit.slice_axis(0, j, 1)?;
            xs = Some(match xs {
                Some(acc) => acc.concat(&xi, 0)?,
                None => xi.clone(),
            });
            ys = Some(match ys {
                Some(acc) => acc.concat(&yj, 0)?,
                None => yj,
            });
        }
    }
    let mean = ssim(&xs.unwrap(), &ys.unwrap(), &SsimParams::default())?;
    mean.mul_const(E::lit(weights.lambda_ssim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkRole, NetworkSpec, NetworkState};
    use crate::rng::child_stream;
    use crate::tensor::finite_diff_check;

    fn weights(l1: f64, l2: f64, gp: f64, ssim_w: f64) -> LossWeights {
        LossWeights {
            lambda1: l1,
            lambda2: l2,
            lambda_gp: gp,
            lambda_ssim: ssim_w,
        }
    }

    fn rand_tensor(shape: &[usize], label: &str) -> Tensor<f64> {
        let mut rng = child_stream(77, label, 0);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| uniform01::<f64>(&mut rng) * 2.0 - 1.0)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Critic that returns `c` for every sample but stays attached to the
    /// graph (zero gradient with respect to its input).
    fn constant_critic<E: Scalar>(c: f64) -> impl Fn(&Tensor<E>) -> Result<Tensor<E>> {
        move |x: &Tensor<E>| {
            let n = x.shape()[0];
            let non_batch: Vec<usize> = (1..x.shape().len()).collect();
            x.sum_axes(&non_batch)?
                .reshape(&[n, 1])?
                .mul_const(E::lit(0.0))?
                .add_const(E::lit(c))
        }
    }

    #[test]
    fn weight_validation() {
        LossWeights::default().validate().unwrap();
        assert!(weights(-1.0, 10.0, 10.0, 10.0).validate().is_err());
        assert!(weights(f64::NAN, 10.0, 10.0, 10.0).validate().is_err());
    }

    #[test]
    fn penalty_of_linear_critic_depends_only_on_weight_norm() {
        // critic(x) = x @ w with fixed w: gradient is w everywhere, so the
        // penalty is (|w| - 1)^2 no matter the data or interpolation.
        let w = Tensor::from_vec(&[3, 1], vec![0.5, 1.0, -2.0]).unwrap();
        let norm = (0.25f64 + 1.0 + 4.0).sqrt();
        let expected = (norm - 1.0) * (norm - 1.0);
        let tape = Tape::new();
        let wv = tape.watch(&w);
        let real = rand_tensor(&[4, 3], "gp-real");
        let fake = rand_tensor(&[4, 3], "gp-fake");
        let mut rng = child_stream(1, "gp", 0);
        let gp = gradient_penalty(&tape, |x| x.matmul(&wv), &real, &fake, &mut rng).unwrap();
        assert!((gp.item() - expected).abs() < 1e-9, "got {}", gp.item());

        // unit-norm weight vector: penalty vanishes
        let unit = Tensor::from_vec(&[2, 1], vec![(0.5f64).sqrt(), (0.5f64).sqrt()]).unwrap();
        let tape = Tape::new();
        let uv = tape.watch(&unit);
        let real = rand_tensor(&[3, 2], "gp-real2");
        let fake = rand_tensor(&[3, 2], "gp-fake2");
        let gp = gradient_penalty(&tape, |x| x.matmul(&uv), &real, &fake, &mut rng).unwrap();
        assert!(gp.item().abs() < 1e-12, "got {}", gp.item());
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let real = rand_tensor(&[3, 4], "gpfd-real");
        let fake = rand_tensor(&[3, 4], "gpfd-fake");
        let w0 = rand_tensor(&[4, 1], "gpfd-w");
        let f = |w: &Tensor<f64>| {
            let tape = w.tape().unwrap_or_else(Tape::new);
            let wv = if w.is_attached() { w.clone() } else { tape.constant(w) };
            // fixed interpolation draws so every evaluation sees the same u
            let mut rng = child_stream(5, "gpfd-u", 0);
            gradient_penalty(
                &tape,
                |x| x.matmul(&wv)?.tanh()?.sum_axes(&[1])?.reshape(&[x.shape()[0], 1]),
                &real,
                &fake,
                &mut rng,
            )
        };
        let err = finite_diff_check(f, &w0, 1e-5).unwrap();
        assert!(err < 1e-3, "gp gradient error {err}");
    }

    #[test]
    fn wgan_losses_for_constant_critic() {
        let real = rand_tensor(&[4, 2], "wgan-real");
        let fake = rand_tensor(&[4, 2], "wgan-fake");
        let mut rng = child_stream(2, "wgan", 0);
        let w = weights(10.0, 10.0, 7.5, 10.0);

        // constant critic: fake and real terms cancel; the zero gradient
        // has norm 0, so the penalty is (0-1)^2 = 1 and the loss is lambda.
        let tape = Tape::new();
        let loss = wgan_d_loss(&tape, constant_critic(3.0), &real, &fake, &w, &mut rng).unwrap();
        assert!((loss.item() - 7.5).abs() < 1e-9, "got {}", loss.item());

        let g = wgan_g_loss(constant_critic(3.0), &fake).unwrap();
        assert!((g.item() + 3.0).abs() < 1e-12);

        let zero_gp = weights(10.0, 10.0, 0.0, 10.0);
        let tape = Tape::new();
        let loss =
            wgan_d_loss(&tape, constant_critic(0.0), &real, &fake, &zero_gp, &mut rng).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn wgan_d_loss_cancels_when_real_equals_fake() {
        let spec = NetworkSpec::new(NetworkRole::Discriminator, 8, 8).with_fmap_cap(8);
        let d = NetworkState::<f64>::build(&spec, 41, 8).unwrap();
        let x = rand_tensor(&[3, 1, 8, 8], "cancel");
        let w = weights(10.0, 10.0, 0.0, 10.0);
        let mut rng = child_stream(3, "cancel", 0);
        let tape = Tape::new();
        let dp = d.watched(&tape);
        let loss = wgan_d_loss(
            &tape,
            |img| d.discriminator_forward(&dp, img),
            &x,
            &x,
            &w,
            &mut rng,
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn alpha_gan_hand_values() {
        let real = Tensor::<f64>::full(&[2, 1, 8, 8], 1.0);
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let mut rng = child_stream(4, "alpha", 0);
        let w = weights(10.0, 0.0, 10.0, 10.0);

        // all-zero networks: E(x) = 0, G(z) = 0-image, critics = 0
        let tape = Tape::new();
        let losses = alpha_gan_losses(
            &tape,
            |x| Ok(Tensor::zeros(&[x.shape()[0], 4])),
            |zz| Ok(Tensor::zeros(&[zz.shape()[0], 1, 8, 8])),
            constant_critic(0.0),
            constant_critic(0.0),
            &real,
            &z,
            &w,
            &mut rng,
        )
        .unwrap();
        // generator: -0 - 0 + 10 * mean|1 - 0| = 10
        assert!((losses.generator.item() - 10.0).abs() < 1e-9);
        assert_eq!(losses.encoder.item(), 0.0);
        assert_eq!(losses.discriminator.item(), 0.0);
        assert_eq!(losses.latent_discriminator.item(), 0.0);

        // perfect reconstruction zeroes the L1 term
        let real_clone = real.clone();
        let g_loss = alpha_gan_g_loss(
            |x| Ok(Tensor::zeros(&[x.shape()[0], 4])),
            move |zz| {
                if zz.shape()[0] == real_clone.shape()[0] {
                    Ok(real_clone.clone())
                } else {
                    Ok(Tensor::zeros(&[zz.shape()[0], 1, 8, 8]))
                }
            },
            constant_critic(0.0),
            &real,
            &z,
            &w,
        )
        .unwrap();
        assert!(g_loss.item().abs() < 1e-12, "got {}", g_loss.item());

        // generator loss is monotone in the reconstruction error
        let worse = alpha_gan_g_loss(
            |x| Ok(Tensor::zeros(&[x.shape()[0], 4])),
            |zz| Ok(Tensor::full(&[zz.shape()[0], 1, 8, 8], 0.5)),
            constant_critic(0.0),
            &real,
            &z,
            &w,
        )
        .unwrap();
        let better = alpha_gan_g_loss(
            |x| Ok(Tensor::zeros(&[x.shape()[0], 4])),
            |zz| Ok(Tensor::full(&[zz.shape()[0], 1, 8, 8], 0.9)),
            constant_critic(0.0),
            &real,
            &z,
            &w,
        )
        .unwrap();
        assert!(better.item() < worse.item());
    }

    #[test]
    fn latent_dim_mismatch_is_an_error() {
        let real = Tensor::<f64>::zeros(&[2, 1, 8, 8]);
        let z = Tensor::<f64>::zeros(&[2, 4]);
        let err = alpha_gan_g_loss(
            |x| Ok(Tensor::zeros(&[x.shape()[0], 6])),
            |zz| Ok(Tensor::zeros(&[zz.shape()[0], 1, 8, 8])),
            constant_critic(0.0),
            &real,
            &z,
            &LossWeights::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn ssim_diversity_values_and_symmetry() {
        let w = weights(10.0, 10.0, 10.0, 10.0);
        // identical images: every pair has SSIM 1 -> loss = lambda
        let img = rand_tensor(&[1, 1, 16, 16], "div");
        let batch = img.concat(&img, 0).unwrap().concat(&img, 0).unwrap();
        let loss = ssim_diversity_loss(&batch, &w).unwrap();
        assert!((loss.item() - 10.0).abs() < 1e-9, "got {}", loss.item());

        // two images: exactly one pair, equal to SSIM of that pair
        let a = rand_tensor(&[1, 1, 16, 16], "div-a");
        let b = rand_tensor(&[1, 1, 16, 16], "div-b");
        let two = a.concat(&b, 0).unwrap();
        let loss_two = ssim_diversity_loss(&two, &w).unwrap();
        let direct = ssim(
            &to_unit_range(&a).unwrap(),
            &to_unit_range(&b).unwrap(),
            &SsimParams::default(),
        )
        .unwrap();
        assert!((loss_two.item() - 10.0 * direct.item()).abs() < 1e-12);

        // permutation symmetry
        let c = rand_tensor(&[1, 1, 16, 16], "div-c");
        let abc = a.concat(&b, 0).unwrap().concat(&c, 0).unwrap();
        let bca = b.concat(&c, 0).unwrap().concat(&a, 0).unwrap();
        let l1 = ssim_diversity_loss(&abc, &w).unwrap();
        let l2 = ssim_diversity_loss(&bca, &w).unwrap();
        assert!((l1.item() - l2.item()).abs() < 1e-12);

        // batch of one rejected
        assert!(ssim_diversity_loss(&a, &w).is_err());
    }

    #[test]
    fn ssim_diversity_gradient_matches_finite_differences() {
        let batch = rand_tensor(&[2, 1, 16, 16], "divfd").mul_const(0.8).unwrap();
        let w = weights(10.0, 10.0, 10.0, 10.0);
        let err = finite_diff_check(|b| ssim_diversity_loss(b, &w), &batch, 1e-4).unwrap();
        assert!(err < 1e-3, "diversity gradient error {err}");
    }

    #[test]
    fn critic_loss_step_descends() {
        // one small gradient step on the critic parameters must lower the
        // critic loss (differentiability end to end, descent direction)
        let spec = NetworkSpec::new(NetworkRole::Discriminator, 8, 8).with_fmap_cap(8);
        let mut d = NetworkState::<f64>::build(&spec, 43, 8).unwrap();
        let real = rand_tensor(&[2, 1, 8, 8], "desc-real");
        let fake = rand_tensor(&[2, 1, 8, 8], "desc-fake");
        let w = LossWeights::default();

        let eval = |state: &NetworkState<f64>, with_grad: bool| -> (f64, Vec<(String, Tensor<f64>)>) {
            let tape = Tape::new();
            let dp = state.watched(&tape);
            let mut rng = child_stream(6, "desc", 0);
            let loss = wgan_d_loss(
                &tape,
                |img| state.discriminator_forward(&dp, img),
                &real,
                &fake,
                &w,
                &mut rng,
            )
            .unwrap();
            let mut grads = Vec::new();
            if with_grad {
                let names: Vec<String> = dp.keys().cloned().collect();
                let wrt: Vec<Tensor<f64>> = names.iter().map(|k| dp[k].clone()).collect();
                let gs = grad(&loss, &wrt, false).unwrap();
                grads = names.into_iter().zip(gs).collect();
            }
            (loss.item(), grads)
        };

        let (before, grads) = eval(&d, true);
        for (name, g) in grads {
            let updated = d.params[&name]
                .sub(&g.mul_const(1e-5).unwrap())
                .unwrap();
            d.set_param(&name, updated).unwrap();
        }
        let (after, _) = eval(&d, false);
        assert!(
            after < before,
            "critic loss did not descend: {before} -> {after}"
        );
    }
}
