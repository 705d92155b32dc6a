//! Evaluation metrics: SSIM + MS-SSIM, Fréchet distance over embedded
//! samples, and the sampling protocols that feed them.
//!
//! Protocols are deterministic: every random choice derives from the
//! caller's seed through labeled child streams, fixed before any pair is
//! evaluated, so results are reproducible bit for bit.

pub mod fid;
pub mod linalg;
pub mod ssim;

pub use fid::{
    embed, fit_gaussian, frechet_distance, read_embeddings, write_embeddings, EmbeddingProvider,
    EmbeddingSet,
};
pub use linalg::{jacobi_eigen, matrix_sqrt_psd};
pub use ssim::{
    feasible_scales, gaussian_window, ms_ssim, ssim, ssim_map, to_unit_range, SsimParams,
    MS_SSIM_WEIGHTS,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_stream, permutation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where protocol images come from: a finite set (sampled by index) or an
/// on-demand sampler such as a generator (driven by the protocol's
/// derived random streams).
pub enum ImageSource<'a, E: Scalar> {
    Set(&'a [Tensor<E>]),
    Sampler(&'a mut dyn FnMut(&mut ChaCha8Rng) -> Result<Tensor<E>>),
}

impl<'a, E: Scalar> ImageSource<'a, E> {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> Result<Tensor<E>> {
        match self {
            ImageSource::Set(images) => {
                if images.is_empty() {
                    return Err(Error::InvalidArgument(
                        "image source is empty".into(),
                    ));
                }
                Ok(images[rng.gen_range(0..images.len())].clone())
            }
            ImageSource::Sampler(f) => f(rng),
        }
    }
}

/// Stack single images `[1,1,H,W]` into one `[K,1,H,W]` batch.
fn stack_images<E: Scalar>(images: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(Error::shape(
            "stack_images",
            format!("expected [1,1,H,W] images, got {:?}", s),
        ));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != s {
            return Err(Error::shape(
                "stack_images",
                format!("inconsistent image shapes {:?} vs {:?}", img.shape(), s),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), 1, s[2], s[3]], data)
}

/// Mean MS-SSIM over `pairs` independently drawn image pairs; the
/// standard diversity protocol (lower = more diverse).
pub fn ms_ssim_protocol<E: Scalar>(
    source: &mut ImageSource<'_, E>,
    pairs: usize,
    seed: u64,
    params: &SsimParams,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::InvalidArgument("pair count must be positive".into()));
    }
    let mut total = 0.0;
    for i in 0..pairs {
        let mut rng = child_stream(seed, "msssim-pair", i as u64);
        let a = source.draw(&mut rng)?;
        let b = source.draw(&mut rng)?;
        total += ms_ssim(&a, &b, params, &MS_SSIM_WEIGHTS)?;
    }
    Ok(total / pairs as f64)
}

/// Outcome of the FID protocol, with the numerical and sampling caveats
/// that the report surfaces as flags.
#[derive(Clone, Copy, Debug)]
pub struct FidOutcome {
    pub value: f64,
    /// A tiny negative distance was clamped to zero.
    pub clamped: bool,
    /// At least one side was smaller than the requested sample count and
    /// was drawn with replacement.
    pub with_replacement: bool,
    /// At least one side had fewer samples than `d + 1`.
    pub underdetermined: bool,
}

fn collect_embeddings<E: Scalar>(
    source: &mut ImageSource<'_, E>,
    side: &str,
    provider: &EmbeddingProvider,
    samples: usize,
    seed: u64,
) -> Result<(EmbeddingSet, bool)> {
    if let EmbeddingProvider::ExternalFile(_) = provider {
        return Ok((embed::<E>(provider, &[])?, false));
    }
    const CHUNK: usize = 64;
    let perm_label = format!("fid-{}-perm", side);
    let draw_label = format!("fid-{}-draw", side);

    let mut with_replacement = false;
    let mut chunks: Vec<EmbeddingSet> = Vec::new();
    let mut pending: Vec<Tensor<E>> = Vec::new();
    let flush = |pending: &mut Vec<Tensor<E>>, chunks: &mut Vec<EmbeddingSet>| -> Result<()> {
        if !pending.is_empty() {
            chunks.push(embed(provider, &[stack_images(pending)?])?);
            pending.clear();
        }
        Ok(())
    };

    match source {
        ImageSource::Set(images) => {
            if images.is_empty() {
                return Err(Error::InvalidArgument("image source is empty".into()));
            }
            let indices: Vec<usize> = if images.len() >= samples {
                let mut rng = child_stream(seed, &perm_label, 0);
                permutation(&mut rng, images.len())[..samples].to_vec()
            } else {
                with_replacement = true;
                let mut rng = child_stream(seed, &draw_label, 0);
                (0..samples).map(|_| rng.gen_range(0..images.len())).collect()
            };
            for idx in indices {
                pending.push(images[idx].clone());
                if pending.len() == CHUNK {
                    flush(&mut pending, &mut chunks)?;
                }
            }
        }
        ImageSource::Sampler(f) => {
            for i in 0..samples {
                let mut rng = child_stream(seed, &draw_label, i as u64);
                pending.push(f(&mut rng)?);
                if pending.len() == CHUNK {
                    flush(&mut pending, &mut chunks)?;
                }
            }
        }
    }
    flush(&mut pending, &mut chunks)?;

    let d = chunks.first().map(|c| c.d).ok_or_else(|| {
        Error::InvalidArgument("fid protocol needs a positive sample count".into())
    })?;
    let mut vectors = Vec::with_capacity(samples * d);
    let mut n = 0;
    for c in chunks {
        vectors.extend_from_slice(&c.vectors);
        n += c.n;
    }
    Ok((EmbeddingSet::new(vectors, n, d, &provider.id())?, with_replacement))
}

/// Embed `samples` images from each side, fit Gaussians, and return the
/// Fréchet distance between them.
pub fn fid_protocol<E: Scalar>(
    real: &mut ImageSource<'_, E>,
    fake: &mut ImageSource<'_, E>,
    provider: &EmbeddingProvider,
    samples: usize,
    seed: u64,
) -> Result<FidOutcome> {
    let (real_set, real_repl) = collect_embeddings(real, "real", provider, samples, seed)?;
    let (fake_set, fake_repl) = collect_embeddings(fake, "fake", provider, samples, seed)?;
    if real_set.d != fake_set.d {
        return Err(Error::InvalidArgument(format!(
            "embedding dimensions differ between sides: {} vs {}",
            real_set.d, fake_set.d
        )));
    }
    let (mu_r, cov_r) = fit_gaussian(&real_set)?;
    let (mu_f, cov_f) = fit_gaussian(&fake_set)?;
    let (value, clamped) = frechet_distance(&mu_r, &cov_r, &mu_f, &cov_f)?;
    Ok(FidOutcome {
        value,
        clamped,
        with_replacement: real_repl || fake_repl,
        underdetermined: real_set.covariance_underdetermined()
            || fake_set.covariance_underdetermined(),
    })
}

/// Evaluation summary serialized into run reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub ms_ssim: f64,
    pub pair_count_fid: u64,
    pub pair_count_msssim: u64,
    pub provider_id: String,
    pub seed: u64,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.ms_ssim) {
            return Err(Error::Numerical(format!(
                "ms_ssim {} outside [-1, 1]",
                self.ms_ssim
            )));
        }
        if self.fid < 0.0 {
            return Err(Error::Numerical(format!("negative fid {}", self.fid)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform01;

    fn noise_image(seed: u64, index: u64, res: usize) -> Tensor<f64> {
        let mut rng = child_stream(seed, "proto-img", index);
        let data: Vec<f64> = (0..res * res).map(|_| uniform01::<f64>(&mut rng)).collect();
        Tensor::from_vec(&[1, 1, res, res], data).unwrap()
    }

    #[test]
    fn msssim_protocol_on_constant_source_is_one() {
        let images = vec![Tensor::<f64>::full(&[1, 1, 16, 16], 0.5)];
        let mut source = ImageSource::Set(&images);
        let v = ms_ssim_protocol(&mut source, 8, 3, &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn protocols_are_deterministic_in_the_seed() {
        let images: Vec<Tensor<f64>> = (0..5).map(|i| noise_image(20, i, 16)).collect();
        let params = SsimParams::default();
        let a = ms_ssim_protocol(&mut ImageSource::Set(&images), 6, 42, &params).unwrap();
        let b = ms_ssim_protocol(&mut ImageSource::Set(&images), 6, 42, &params).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = ms_ssim_protocol(&mut ImageSource::Set(&images), 6, 43, &params).unwrap();
        assert_ne!(a.to_bits(), c.to_bits());

        let provider = EmbeddingProvider::PixelDownsample;
        let f1 = fid_protocol(
            &mut ImageSource::Set(&images),
            &mut ImageSource::Set(&images[..3]),
            &provider,
            4,
            7,
        )
        .unwrap();
        let f2 = fid_protocol(
            &mut ImageSource::Set(&images),
            &mut ImageSource::Set(&images[..3]),
            &provider,
            4,
            7,
        )
        .unwrap();
        assert_eq!(f1.value.to_bits(), f2.value.to_bits());
        assert!(f1.with_replacement, "3 images for 4 samples needs replacement");
    }

    #[test]
    fn fid_protocol_of_identical_full_sets_is_zero() {
        let images: Vec<Tensor<f64>> = (0..6).map(|i| noise_image(21, i, 16)).collect();
        let outcome = fid_protocol(
            &mut ImageSource::Set(&images),
            &mut ImageSource::Set(&images),
            &EmbeddingProvider::PixelDownsample,
            images.len(),
            9,
        )
        .unwrap();
        assert!(
            outcome.value < 1e-6,
            "same set both sides must give ~0, got {}",
            outcome.value
        );
        assert!(!outcome.with_replacement);
        assert!(outcome.underdetermined, "6 samples for d=256 is underdetermined");
    }

    #[test]
    fn sampler_sources_drive_protocols() {
        let mut counter = 0usize;
        let mut sampler = |rng: &mut ChaCha8Rng| {
            counter += 1;
            let data: Vec<f64> = (0..16 * 16).map(|_| uniform01::<f64>(rng)).collect();
            Tensor::from_vec(&[1, 1, 16, 16], data)
        };
        let mut fake = ImageSource::Sampler(&mut sampler);
        let images: Vec<Tensor<f64>> = (0..4).map(|i| noise_image(22, i, 16)).collect();
        let outcome = fid_protocol(
            &mut ImageSource::Set(&images),
            &mut fake,
            &EmbeddingProvider::RandomConv,
            4,
            11,
        )
        .unwrap();
        assert_eq!(counter, 4);
        assert!(outcome.value.is_finite());
    }

    #[test]
    fn report_round_trips_and_validates() {
        let report = MetricReport {
            fid: 12.5,
            ms_ssim: 0.66,
            pair_count_fid: 10000,
            pair_count_msssim: 2000,
            provider_id: "pixel-downsample".into(),
            seed: 7,
            model_id: "pggan".into(),
            flags: vec![],
        };
        report.validate().unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"pair_count_fid\":10000"));
        assert!(!json.contains("flags"), "empty flags are omitted");
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.provider_id, report.provider_id);

        let bad = MetricReport {
            ms_ssim: 1.5,
            ..report
        };
        assert!(bad.validate().is_err());
    }
}
