//! Progressive-GAN building blocks and network builders.
//!
//! Layers follow the equalized-learning-rate convention: weights are stored
//! as draws from a unit normal and the He constant `sqrt(2 / fan_in)` is
//! applied at runtime, so the effective learning rate is uniform across
//! layers. Four networks share these blocks: the progressive generator and
//! discriminator (which grow resolution by resolution with fade-in
//! blending), and the fixed-resolution encoder and latent discriminator
//! used by the adversarial autoencoder variant.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{child_stream, normal_vec};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Negative slope shared by every leaky-relu in the stack.
pub const LRELU_SLOPE: f64 = 0.2;
/// Pixelnorm variance floor.
pub const PIXELNORM_EPS: f64 = 1e-8;
/// Variance floor inside the minibatch standard-deviation layer.
pub const STDDEV_EPS: f64 = 1e-16;

/// Which network a spec describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkRole {
    Generator,
    Discriminator,
    Encoder,
    LatentDiscriminator,
}

impl NetworkRole {
    /// Short, stable identifier used in parameter and checkpoint keys.
    pub fn key(self) -> &'static str {
        prefix(self)
    }
}

/// Architecture hyperparameters shared by the builders.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    pub role: NetworkRole,
    pub latent_dim: usize,
    pub max_resolution: usize,
    /// Feature-map ceiling; widths follow `min(cap, 4096 / resolution)`.
    pub fmap_cap: usize,
    pub image_channels: usize,
}

impl NetworkSpec {
    pub fn new(role: NetworkRole, latent_dim: usize, max_resolution: usize) -> NetworkSpec {
        NetworkSpec {
            role,
            latent_dim,
            max_resolution,
            fmap_cap: 256,
            image_channels: 1,
        }
    }

    pub fn with_fmap_cap(mut self, cap: usize) -> NetworkSpec {
        self.fmap_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_resolution < 4 || !self.max_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "max_resolution must be a power of two >= 4, got {}",
                self.max_resolution
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.fmap_cap == 0 {
            return Err(Error::Config("fmap_cap must be positive".into()));
        }
        if self.image_channels != 1 {
            return Err(Error::Config(
                "only single-channel grayscale images are supported".into(),
            ));
        }
        Ok(())
    }

    /// Feature width at a given resolution: `min(cap, 4096 / resolution)`.
    pub fn channels(&self, resolution: usize) -> usize {
        self.fmap_cap.min(4096 / resolution)
    }
}

/// A built network: named parameters plus the progressive-growth cursor.
/// Parameters are stored detached; a training step watches them on a fresh
/// tape via [`NetworkState::watched`], while evaluation can run forward on
/// the stored values directly.
#[derive(Clone, Debug)]
pub struct NetworkState<E: Scalar> {
    pub spec: NetworkSpec,
    pub init_seed: u64,
    pub resolution_active: usize,
    pub fade_alpha: f64,
    pub params: BTreeMap<String, Tensor<E>>,
}

fn require_res(res: usize, max: usize) -> Result<()> {
    if res < 4 || !res.is_power_of_two() || res > max {
        return Err(Error::Config(format!(
            "resolution {} invalid for ladder with ceiling {}",
            res, max
        )));
    }
    Ok(())
}

fn prefix(role: NetworkRole) -> &'static str {
    match role {
        NetworkRole::Generator => "g",
        NetworkRole::Discriminator => "d",
        NetworkRole::Encoder => "e",
        NetworkRole::LatentDiscriminator => "l",
    }
}

fn init_normal<E: Scalar>(
    params: &mut BTreeMap<String, Tensor<E>>,
    seed: u64,
    name: &str,
    shape: &[usize],
) -> Result<()> {
    let mut rng = child_stream(seed, name, 0);
    let n: usize = shape.iter().product();
    let t = Tensor::from_vec(shape, normal_vec(&mut rng, n))?;
    params.insert(name.to_string(), t);
    Ok(())
}

fn init_zeros<E: Scalar>(params: &mut BTreeMap<String, Tensor<E>>, name: &str, shape: &[usize]) {
    params.insert(name.to_string(), Tensor::zeros(shape));
}

fn add_conv<E: Scalar>(
    params: &mut BTreeMap<String, Tensor<E>>,
    seed: u64,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<()> {
    init_normal(params, seed, &format!("{name}.w"), &[c_out, c_in, k, k])?;
    init_zeros(params, &format!("{name}.b"), &[c_out]);
    Ok(())
}

fn add_dense<E: Scalar>(
    params: &mut BTreeMap<String, Tensor<E>>,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    init_normal(params, seed, &format!("{name}.w"), &[d_in, d_out])?;
    init_zeros(params, &format!("{name}.b"), &[d_out]);
    Ok(())
}

/// Parameters added when a progressive network reaches `res`.
fn add_resolution_params<E: Scalar>(
    params: &mut BTreeMap<String, Tensor<E>>,
    spec: &NetworkSpec,
    seed: u64,
    res: usize,
) -> Result<()> {
    let nf = spec.channels(res);
    match spec.role {
        NetworkRole::Generator => {
            if res > 4 {
                let nf_prev = spec.channels(res / 2);
                add_conv(params, seed, &format!("g.b{res}.conv1"), nf, nf_prev, 3)?;
                add_conv(params, seed, &format!("g.b{res}.conv2"), nf, nf, 3)?;
            }
            add_conv(params, seed, &format!("g.to{res}"), spec.image_channels, nf, 1)?;
        }
        NetworkRole::Discriminator | NetworkRole::Encoder => {
            let pfx = prefix(spec.role);
            if res > 4 {
                let nf_next = spec.channels(res / 2);
                add_conv(params, seed, &format!("{pfx}.b{res}.conv1"), nf, nf, 3)?;
                add_conv(params, seed, &format!("{pfx}.b{res}.conv2"), nf_next, nf, 3)?;
            }
            add_conv(params, seed, &format!("{pfx}.from{res}"), nf, spec.image_channels, 1)?;
        }
        NetworkRole::LatentDiscriminator => {
            return Err(Error::Config(
                "latent discriminator has no resolution ladder".into(),
            ));
        }
    }
    Ok(())
}

impl<E: Scalar> NetworkState<E> {
    /// Build a network with unit-normal weights and zero biases, starting
    /// at `start_resolution` of the progressive ladder (fixed-resolution
    /// roles must start at `spec.max_resolution`).
    pub fn build(spec: &NetworkSpec, seed: u64, start_resolution: usize) -> Result<NetworkState<E>> {
        spec.validate()?;
        let progressive = matches!(
            spec.role,
            NetworkRole::Generator | NetworkRole::Discriminator
        );
        if !progressive && spec.role != NetworkRole::LatentDiscriminator
            && start_resolution != spec.max_resolution
        {
            return Err(Error::Config(
                "encoder networks are fixed at max_resolution".into(),
            ));
        }
        let mut params = BTreeMap::new();
        match spec.role {
            NetworkRole::Generator => {
                require_res(start_resolution, spec.max_resolution)?;
                let nf4 = spec.channels(4);
                add_dense(&mut params, seed, "g.seed.dense", spec.latent_dim, nf4 * 16)?;
                add_conv(&mut params, seed, "g.seed.conv", nf4, nf4, 3)?;
                let mut r = 4;
                while r <= start_resolution {
                    add_resolution_params(&mut params, spec, seed, r)?;
                    r *= 2;
                }
            }
            NetworkRole::Discriminator | NetworkRole::Encoder => {
                require_res(start_resolution, spec.max_resolution)?;
                let pfx = prefix(spec.role);
                let nf4 = spec.channels(4);
                let mut r = 4;
                while r <= start_resolution {
                    add_resolution_params(&mut params, spec, seed, r)?;
                    r *= 2;
                }
                let final_in = if spec.role == NetworkRole::Discriminator {
                    nf4 + 1 // minibatch-stddev channel
                } else {
                    nf4
                };
                add_conv(&mut params, seed, &format!("{pfx}.final.conv"), nf4, final_in, 3)?;
                add_dense(&mut params, seed, &format!("{pfx}.final.dense1"), nf4 * 16, nf4)?;
                let head_out = if spec.role == NetworkRole::Discriminator {
                    1
                } else {
                    spec.latent_dim
                };
                add_dense(&mut params, seed, &format!("{pfx}.head"), nf4, head_out)?;
            }
            NetworkRole::LatentDiscriminator => {
                let hidden = spec.channels(4);
                add_dense(&mut params, seed, "l.d1", spec.latent_dim, hidden)?;
                add_dense(&mut params, seed, "l.d2", hidden, hidden)?;
                add_dense(&mut params, seed, "l.d3", hidden, hidden)?;
                add_dense(&mut params, seed, "l.head", hidden, 1)?;
            }
        }
        Ok(NetworkState {
            spec: spec.clone(),
            init_seed: seed,
            resolution_active: start_resolution,
            fade_alpha: 1.0,
            params,
        })
    }

    /// Double the active resolution: initialize the new block's parameters
    /// (unit-normal weights, zero biases), keep every existing parameter
    /// untouched, and reset the fade to fully-old.
    pub fn grow(&mut self, next_resolution: usize) -> Result<()> {
        if !matches!(
            self.spec.role,
            NetworkRole::Generator | NetworkRole::Discriminator
        ) {
            return Err(Error::Config(
                "only generator and discriminator networks grow".into(),
            ));
        }
        if next_resolution != self.resolution_active * 2 {
            return Err(Error::Config(format!(
                "growth must double the resolution: {} -> {}",
                self.resolution_active, next_resolution
            )));
        }
        if next_resolution > self.spec.max_resolution {
            return Err(Error::Config(format!(
                "resolution {} exceeds ceiling {}",
                next_resolution, self.spec.max_resolution
            )));
        }
        add_resolution_params(&mut self.params, &self.spec, self.init_seed, next_resolution)?;
        self.resolution_active = next_resolution;
        self.fade_alpha = 0.0;
        Ok(())
    }

    /// Watched copies of every parameter on `tape`, keyed by name; the
    /// handles record onto the tape so gradients can be taken.
    pub fn watched(&self, tape: &Tape<E>) -> BTreeMap<String, Tensor<E>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.watch(v)))
            .collect()
    }

    /// Replace a parameter's stored value (used by the optimizer). The new
    /// value must match the existing shape and be detached.
    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value.detach();
        Ok(())
    }
}

fn lookup<'a, E: Scalar>(
    params: &'a BTreeMap<String, Tensor<E>>,
    name: &str,
) -> Result<&'a Tensor<E>> {
    params
        .get(name)
        .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
}

/// Equalized-learning-rate convolution: `conv(x, w * sqrt(2/fan_in)) + b`.
pub fn eq_conv<E: Scalar>(
    params: &BTreeMap<String, Tensor<E>>,
    name: &str,
    x: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let w = lookup(params, &format!("{name}.w"))?;
    let b = lookup(params, &format!("{name}.b"))?;
    let s = w.shape();
    if s.len() != 4 {
        return Err(Error::shape("eq_conv", format!("{name}.w is not rank 4")));
    }
    let fan_in = s[1] * s[2] * s[3];
    let c = E::lit((2.0 / fan_in as f64).sqrt());
    let y = x.conv2d(&w.mul_const(c)?, stride, pad)?;
    let ys = y.shape().to_vec();
    y.add(&b.broadcast_axes(&[0, 2, 3], &[ys[0], ys[2], ys[3]])?)
}

/// Equalized-learning-rate dense layer: `x @ (w * sqrt(2/fan_in)) + b`.
pub fn eq_dense<E: Scalar>(
    params: &BTreeMap<String, Tensor<E>>,
    name: &str,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let w = lookup(params, &format!("{name}.w"))?;
    let b = lookup(params, &format!("{name}.b"))?;
    let s = w.shape();
    if s.len() != 2 {
        return Err(Error::shape("eq_dense", format!("{name}.w is not rank 2")));
    }
    let c = E::lit((2.0 / s[0] as f64).sqrt());
    let y = x.matmul(&w.mul_const(c)?)?;
    let n = y.shape()[0];
    y.add(&b.broadcast_axes(&[0], &[n])?)
}

/// Pixelwise feature-vector normalization:
/// `x / sqrt(mean_over_channels(x^2) + eps)`.
pub fn pixelnorm<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "pixelnorm",
            format!("expected [N,C,H,W], got {:?}", s),
        ));
    }
    let c = s[1];
    let mean_sq = x
        .square()?
        .sum_axes(&[1])?
        .mul_const(E::lit(1.0 / c as f64))?;
    let denom = mean_sq.add_const(E::lit(PIXELNORM_EPS))?.sqrt()?;
    x.div(&denom.broadcast_axes(&[1], &[c])?)
}

/// Append one constant feature map holding the batch-average per-feature
/// standard deviation (population convention) to every sample.
pub fn minibatch_stddev<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "minibatch_stddev",
            format!("expected [N,C,H,W], got {:?}", s),
        ));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if n < 2 {
        return Err(Error::InvalidArgument(
            "minibatch stddev needs a batch of at least 2".into(),
        ));
    }
    let inv_n = E::lit(1.0 / n as f64);
    let mean = x.sum_axes(&[0])?.mul_const(inv_n)?;
    let centered = x.sub(&mean.broadcast_axes(&[0], &[n])?)?;
    let var = centered.square()?.sum_axes(&[0])?.mul_const(inv_n)?;
    let std = var.add_const(E::lit(STDDEV_EPS))?.sqrt()?;
    let scalar = std.mean_all()?;
    let map = Tensor::ones(&[n, 1, h, w]).mul(&scalar)?;
    x.concat(&map, 1)
}

/// Linear interpolation between the outgoing and incoming paths of a
/// freshly grown block: `(1 - alpha) * old + alpha * new`.
pub fn fade_in_blend<E: Scalar>(
    old_path: &Tensor<E>,
    new_path: &Tensor<E>,
    alpha: f64,
) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "fade alpha {} outside [0, 1]",
            alpha
        )));
    }
    if old_path.shape() != new_path.shape() {
        return Err(Error::shape(
            "fade_in_blend",
            format!("{:?} vs {:?}", old_path.shape(), new_path.shape()),
        ));
    }
    old_path
        .mul_const(E::lit(1.0 - alpha))?
        .add(&new_path.mul_const(E::lit(alpha))?)
}

fn lrelu<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    x.leaky_relu(E::lit(LRELU_SLOPE))
}

impl<E: Scalar> NetworkState<E> {
    /// Generator forward at the active resolution: latent `[N, latent_dim]`
    /// to image `[N, 1, R, R]` in `[-1, 1]` (tanh output).
    pub fn generator_forward(
        &self,
        params: &BTreeMap<String, Tensor<E>>,
        z: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if self.spec.role != NetworkRole::Generator {
            return Err(Error::Config("generator_forward on a non-generator".into()));
        }
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.spec.latent_dim {
            return Err(Error::shape(
                "generator_forward",
                format!("latent must be [N,{}], got {:?}", self.spec.latent_dim, zs),
            ));
        }
        let n = zs[0];
        let nf4 = self.spec.channels(4);
        let res = self.resolution_active;

        let mut h = lrelu(&eq_dense(params, "g.seed.dense", z)?)?
            .reshape(&[n, nf4, 4, 4])?;
        h = pixelnorm(&h)?;
        h = pixelnorm(&lrelu(&eq_conv(params, "g.seed.conv", &h, 1, 1)?)?)?;

        if res == 4 {
            return eq_conv(params, "g.to4", &h, 1, 0)?.tanh();
        }
        let mut r = 8;
        loop {
            let prev = h.clone();
            let up = h.upsample2x()?;
            let c1 = pixelnorm(&lrelu(&eq_conv(params, &format!("g.b{r}.conv1"), &up, 1, 1)?)?)?;
            h = pixelnorm(&lrelu(&eq_conv(params, &format!("g.b{r}.conv2"), &c1, 1, 1)?)?)?;
            if r == res {
                let img_new = eq_conv(params, &format!("g.to{r}"), &h, 1, 0)?;
                let img = if self.fade_alpha < 1.0 {
                    let img_old =
                        eq_conv(params, &format!("g.to{}", r / 2), &prev, 1, 0)?.upsample2x()?;
                    fade_in_blend(&img_old, &img_new, self.fade_alpha)?
                } else {
                    img_new
                };
                return img.tanh();
            }
            r *= 2;
        }
    }

    fn critic_trunk(
        &self,
        params: &BTreeMap<String, Tensor<E>>,
        x: &Tensor<E>,
        use_stddev: bool,
    ) -> Result<Tensor<E>> {
        let pfx = prefix(self.spec.role);
        let res = self.resolution_active;
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.spec.image_channels || xs[2] != res || xs[3] != res {
            return Err(Error::shape(
                "critic_trunk",
                format!("expected [N,1,{res},{res}], got {:?}", xs),
            ));
        }
        let nf4 = self.spec.channels(4);
        let n = xs[0];

        let mut h;
        if res == 4 {
            h = lrelu(&eq_conv(params, &format!("{pfx}.from4"), x, 1, 0)?)?;
        } else {
            let block = |h: &Tensor<E>, r: usize| -> Result<Tensor<E>> {
                let c1 = lrelu(&eq_conv(params, &format!("{pfx}.b{r}.conv1"), h, 1, 1)?)?;
                let c2 = lrelu(&eq_conv(params, &format!("{pfx}.b{r}.conv2"), &c1, 1, 1)?)?;
                c2.avgpool2x()
            };
            let h_new = lrelu(&eq_conv(params, &format!("{pfx}.from{res}"), x, 1, 0)?)?;
            let h_new = block(&h_new, res)?;
            h = if self.fade_alpha < 1.0 {
                let h_old = lrelu(&eq_conv(
                    params,
                    &format!("{pfx}.from{}", res / 2),
                    &x.avgpool2x()?,
                    1,
                    0,
                )?)?;
                fade_in_blend(&h_old, &h_new, self.fade_alpha)?
            } else {
                h_new
            };
            let mut r = res / 2;
            while r >= 8 {
                h = block(&h, r)?;
                r /= 2;
            }
        }

        if use_stddev {
            h = minibatch_stddev(&h)?;
        }
        h = lrelu(&eq_conv(params, &format!("{pfx}.final.conv"), &h, 1, 1)?)?;
        h = h.reshape(&[n, nf4 * 16])?;
        h = lrelu(&eq_dense(params, &format!("{pfx}.final.dense1"), &h)?)?;
        eq_dense(params, &format!("{pfx}.head"), &h)
    }

    /// Discriminator forward: image `[N, 1, R, R]` to critic score `[N, 1]`
    /// (linear head, no activation).
    pub fn discriminator_forward(
        &self,
        params: &BTreeMap<String, Tensor<E>>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if self.spec.role != NetworkRole::Discriminator {
            return Err(Error::Config(
                "discriminator_forward on a non-discriminator".into(),
            ));
        }
        self.critic_trunk(params, x, true)
    }

    /// Encoder forward: image `[N, 1, R, R]` to latent `[N, latent_dim]`
    /// (deterministic, no output activation).
    pub fn encoder_forward(
        &self,
        params: &BTreeMap<String, Tensor<E>>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if self.spec.role != NetworkRole::Encoder {
            return Err(Error::Config("encoder_forward on a non-encoder".into()));
        }
        self.critic_trunk(params, x, false)
    }

    /// Latent-discriminator forward: latent `[N, latent_dim]` to score
    /// `[N, 1]` through three equalized-dense + leaky-relu layers and a
    /// linear head.
    pub fn latent_discriminator_forward(
        &self,
        params: &BTreeMap<String, Tensor<E>>,
        z: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        if self.spec.role != NetworkRole::LatentDiscriminator {
            return Err(Error::Config(
                "latent_discriminator_forward on the wrong role".into(),
            ));
        }
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.spec.latent_dim {
            return Err(Error::shape(
                "latent_discriminator_forward",
                format!("latent must be [N,{}], got {:?}", self.spec.latent_dim, zs),
            ));
        }
        let mut h = lrelu(&eq_dense(params, "l.d1", z)?)?;
        h = lrelu(&eq_dense(params, "l.d2", &h)?)?;
        h = lrelu(&eq_dense(params, "l.d3", &h)?)?;
        eq_dense(params, "l.head", &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform01;

    fn spec(role: NetworkRole, latent: usize, max_res: usize, cap: usize) -> NetworkSpec {
        NetworkSpec::new(role, latent, max_res).with_fmap_cap(cap)
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = child_stream(seed, "nn-test", 0);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| uniform01::<f64>(&mut rng) * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn channel_schedule_follows_cap_and_curve() {
        let s = spec(NetworkRole::Generator, 512, 256, 256);
        assert_eq!(s.channels(4), 256);
        assert_eq!(s.channels(16), 256);
        assert_eq!(s.channels(32), 128);
        assert_eq!(s.channels(256), 16);
        let small = s.with_fmap_cap(8);
        assert_eq!(small.channels(4), 8);
        assert_eq!(small.channels(256), 8);
    }

    #[test]
    fn equalized_scale_matches_pre_scaled_plain_forward() {
        let s = spec(NetworkRole::Discriminator, 16, 8, 8);
        let net = NetworkState::<f64>::build(&s, 5, 8).unwrap();
        let w = net.params.get("d.from8.w").unwrap();
        let b = net.params.get("d.from8.b").unwrap();
        // fan_in of a 1x1 single-channel conv is 1 -> c = sqrt(2)
        let c = (2.0f64 / 1.0).sqrt();
        let x = rand_tensor(&[2, 1, 8, 8], 1);
        let eq = eq_conv(&net.params, "d.from8", &x, 1, 0).unwrap();
        let ys = x.conv2d(&w.mul_const(c).unwrap(), 1, 0).unwrap();
        let plain = ys
            .add(&b.broadcast_axes(&[0, 2, 3], &[2, 8, 8]).unwrap())
            .unwrap();
        for (a, p) in eq.data().iter().zip(plain.data()) {
            assert_eq!(a.to_bits(), p.to_bits());
        }
        // fan_in for a 3x3 conv over 16 channels is 144
        let w16 = Tensor::<f64>::ones(&[4, 16, 3, 3]);
        assert_eq!(w16.shape()[1] * w16.shape()[2] * w16.shape()[3], 144);
    }

    #[test]
    fn pixelnorm_identities() {
        let x = Tensor::<f64>::full(&[1, 4, 2, 2], 2.0);
        let y = pixelnorm(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-8, "got {v}");
        }
        let z = pixelnorm(&Tensor::<f64>::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));

        // mean over channels of the output squared is ~1 for nonzero input
        let x = rand_tensor(&[2, 5, 3, 3], 2).add_const(0.1).unwrap();
        let y = pixelnorm(&x).unwrap();
        let msq = y
            .square()
            .unwrap()
            .sum_axes(&[1])
            .unwrap()
            .mul_const(1.0 / 5.0)
            .unwrap();
        for v in msq.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }

        // idempotence up to the eps floor
        let twice = pixelnorm(&y).unwrap();
        for (a, b) in twice.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minibatch_stddev_appends_constant_map() {
        // identical samples -> zero map (up to the eps floor inside sqrt)
        let x = rand_tensor(&[1, 2, 4, 4], 3);
        let batch = x.concat(&x, 0).unwrap();
        let y = minibatch_stddev(&batch).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        let map = y.slice_axis(1, 2, 1).unwrap();
        for v in map.data() {
            assert!(v.abs() < 1e-7, "got {v}");
        }

        // batch of a 0-image and a 2-image -> population stddev 1 everywhere
        let zeros = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let twos = Tensor::<f64>::full(&[1, 1, 4, 4], 2.0);
        let y = minibatch_stddev(&zeros.concat(&twos, 0).unwrap()).unwrap();
        let map = y.slice_axis(1, 1, 1).unwrap();
        for v in map.data() {
            assert!((v - 1.0).abs() < 1e-9, "got {v}");
        }

        assert!(minibatch_stddev(&zeros).is_err(), "batch of one rejected");
    }

    #[test]
    fn fade_blend_endpoints_and_midpoint() {
        let old = rand_tensor(&[2, 1, 4, 4], 4);
        let new = rand_tensor(&[2, 1, 4, 4], 5);
        let at0 = fade_in_blend(&old, &new, 0.0).unwrap();
        for (a, b) in at0.data().iter().zip(old.data()) {
            assert_eq!(a, b);
        }
        let at1 = fade_in_blend(&old, &new, 1.0).unwrap();
        for (a, b) in at1.data().iter().zip(new.data()) {
            assert_eq!(a, b);
        }
        let zeros = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let twos = Tensor::<f64>::full(&[1, 1, 2, 2], 2.0);
        let mid = fade_in_blend(&zeros, &twos, 0.5).unwrap();
        assert!(mid.data().iter().all(|v| (*v - 1.0).abs() < 1e-15));

        assert!(fade_in_blend(&old, &new, -0.1).is_err());
        assert!(fade_in_blend(&old, &new, 1.5).is_err());
    }

    #[test]
    fn generator_walks_the_full_ladder() {
        let s = spec(NetworkRole::Generator, 16, 256, 8);
        let mut net = NetworkState::<f64>::build(&s, 7, 4).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 16]);
        let mut r = 4;
        loop {
            let img = net.generator_forward(&net.params, &z).unwrap();
            assert_eq!(img.shape(), &[1, 1, r, r]);
            assert!(img.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
            if r == 256 {
                break;
            }
            r *= 2;
            net.grow(r).unwrap();
            net.fade_alpha = 0.5;
        }
    }

    #[test]
    fn growth_preserves_old_output_at_alpha_zero() {
        let s = spec(NetworkRole::Generator, 8, 16, 8);
        let mut net = NetworkState::<f64>::build(&s, 11, 4).unwrap();
        let z = rand_tensor(&[3, 8], 6);
        let before = net.generator_forward(&net.params, &z).unwrap();
        let before_params: Vec<(String, Vec<f64>)> = net
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_vec()))
            .collect();

        net.grow(8).unwrap();
        assert_eq!(net.fade_alpha, 0.0);
        for (name, old) in &before_params {
            let now = net.params.get(name).unwrap().to_vec();
            for (a, b) in old.iter().zip(&now) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} changed during growth");
            }
        }

        let after = net.generator_forward(&net.params, &z).unwrap();
        let up = before.upsample2x().unwrap();
        assert_eq!(after.shape(), up.shape());
        for (a, b) in after.data().iter().zip(up.data()) {
            assert!((a - b).abs() < 1e-12, "seam mismatch {a} vs {b}");
        }
    }

    #[test]
    fn grown_network_matches_directly_built_one() {
        let s = spec(NetworkRole::Discriminator, 8, 16, 8);
        let mut grown = NetworkState::<f64>::build(&s, 13, 4).unwrap();
        grown.grow(8).unwrap();
        grown.grow(16).unwrap();
        let direct = NetworkState::<f64>::build(&s, 13, 16).unwrap();
        assert_eq!(grown.params.len(), direct.params.len());
        for (k, v) in &direct.params {
            let g = grown.params.get(k).expect("missing param");
            assert_eq!(g.to_vec(), v.to_vec(), "{k} differs");
        }
    }

    #[test]
    fn grow_rejects_bad_jumps() {
        let s = spec(NetworkRole::Generator, 8, 16, 8);
        let mut net = NetworkState::<f64>::build(&s, 1, 8).unwrap();
        assert!(net.grow(32).is_err(), "non-doubling jump");
        net.grow(16).unwrap();
        assert!(net.grow(32).is_err(), "ceiling exceeded");
        let mut enc =
            NetworkState::<f64>::build(&spec(NetworkRole::Encoder, 8, 16, 8), 1, 16).unwrap();
        assert!(enc.grow(32).is_err(), "encoder does not grow");
    }

    #[test]
    fn discriminator_scores_and_linear_head() {
        let s = spec(NetworkRole::Discriminator, 8, 8, 8);
        let mut net = NetworkState::<f64>::build(&s, 17, 8).unwrap();
        let x = rand_tensor(&[4, 1, 8, 8], 7);
        let scores = net.discriminator_forward(&net.params, &x).unwrap();
        assert_eq!(scores.shape(), &[4, 1]);

        // constant batch: stddev map is ~zero, scores stay finite
        let flat = Tensor::<f64>::full(&[3, 1, 8, 8], 0.25);
        let fs = net.discriminator_forward(&net.params, &flat).unwrap();
        assert!(fs.data().iter().all(|v| v.is_finite()));

        // doubling the head weight doubles every score (bias is zero-init)
        let head = net.params.get("d.head.w").unwrap().mul_const(2.0).unwrap();
        net.set_param("d.head.w", head).unwrap();
        let doubled = net.discriminator_forward(&net.params, &x).unwrap();
        for (a, b) in doubled.data().iter().zip(scores.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_scores() {
        let s = spec(NetworkRole::Discriminator, 8, 8, 8);
        let net = NetworkState::<f64>::build(&s, 19, 8).unwrap();
        let a = rand_tensor(&[1, 1, 8, 8], 8);
        let b = rand_tensor(&[1, 1, 8, 8], 9);
        let c = rand_tensor(&[1, 1, 8, 8], 10);
        let abc = a.concat(&b, 0).unwrap().concat(&c, 0).unwrap();
        let cab = c.concat(&a, 0).unwrap().concat(&b, 0).unwrap();
        let s1 = net.discriminator_forward(&net.params, &abc).unwrap();
        let s2 = net.discriminator_forward(&net.params, &cab).unwrap();
        let v1 = s1.to_vec();
        let v2 = s2.to_vec();
        assert!((v1[0] - v2[1]).abs() < 1e-12);
        assert!((v1[1] - v2[2]).abs() < 1e-12);
        assert!((v1[2] - v2[0]).abs() < 1e-12);
    }

    #[test]
    fn encoder_and_latent_discriminator_shapes() {
        let g = NetworkState::<f64>::build(&spec(NetworkRole::Generator, 12, 16, 8), 23, 16).unwrap();
        let e = NetworkState::<f64>::build(&spec(NetworkRole::Encoder, 12, 16, 8), 23, 16).unwrap();
        let l =
            NetworkState::<f64>::build(&spec(NetworkRole::LatentDiscriminator, 12, 16, 8), 23, 16)
                .unwrap();

        let x = rand_tensor(&[2, 1, 16, 16], 11);
        let zhat = e.encoder_forward(&e.params, &x).unwrap();
        assert_eq!(zhat.shape(), &[2, 12]);

        let img = g.generator_forward(&g.params, &zhat).unwrap();
        assert_eq!(img.shape(), &[2, 1, 16, 16]);

        let score = l
            .latent_discriminator_forward(&l.params, &Tensor::zeros(&[2, 12]))
            .unwrap();
        assert_eq!(score.shape(), &[2, 1]);
        assert!(score.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_flow_through_both_networks() {
        let gs = spec(NetworkRole::Generator, 6, 8, 8);
        let ds = spec(NetworkRole::Discriminator, 6, 8, 8);
        let g = NetworkState::<f64>::build(&gs, 29, 8).unwrap();
        let d = NetworkState::<f64>::build(&ds, 31, 8).unwrap();

        let tape = Tape::new();
        let gp = g.watched(&tape);
        let dp = d.watched(&tape);
        let z = rand_tensor(&[2, 6], 12);
        let img = g.generator_forward(&gp, &z).unwrap();
        let loss = d.discriminator_forward(&dp, &img).unwrap().mean_all().unwrap();

        let wrt: Vec<Tensor<f64>> = gp.values().cloned().collect();
        let grads = crate::tensor::grad(&loss, &wrt, false).unwrap();
        let mut nonzero = 0;
        for g in &grads {
            assert!(g.data().iter().all(|v| v.is_finite()));
            if g.data().iter().any(|v| *v != 0.0) {
                nonzero += 1;
            }
        }
        assert!(nonzero > 0, "no gradient reached the generator");
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        assert!(spec(NetworkRole::Generator, 8, 6, 8).validate().is_err());
        assert!(spec(NetworkRole::Generator, 8, 2, 8).validate().is_err());
        assert!(spec(NetworkRole::Generator, 0, 8, 8).validate().is_err());
        let mut s = spec(NetworkRole::Generator, 8, 8, 8);
        s.image_channels = 3;
        assert!(s.validate().is_err());
    }
}
