//! Synthetic head-phantom slices: a deterministic, seedable family of
//! ellipse-composite images that stands in for restricted MR data so the
//! whole pipeline runs end to end at desk scale.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::rng::{child_stream, standard_normal, uniform01};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{normalize_intensity, SliceRecord};

/// Parameters of the phantom family.
#[derive(Clone, Copy, Debug)]
pub struct PhantomParams {
    pub resolution: usize,
    /// Maximum number of interior tissue ellipses (1..=count drawn).
    pub ellipse_count: usize,
    /// Raw intensity of the bright lesion blob, in (0, 1].
    pub tumor_intensity: f64,
    /// Additive Gaussian noise level on raw intensities.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomParams {
    pub fn new(resolution: usize, seed: u64) -> PhantomParams {
        PhantomParams {
            resolution,
            ellipse_count: 3,
            tumor_intensity: 0.95,
            noise_sigma: 0.03,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "phantom resolution must be a power of two >= 4, got {}",
                self.resolution
            )));
        }
        if !(self.tumor_intensity > 0.0 && self.tumor_intensity <= 1.0) {
            return Err(Error::Config(format!(
                "tumor intensity {} outside (0, 1]",
                self.tumor_intensity
            )));
        }
        if self.ellipse_count == 0 {
            return Err(Error::Config("ellipse_count must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }
}

fn draw(rng: &mut impl RngCore) -> f64 {
    uniform01::<f64>(rng)
}

fn rotated(
    rng: &mut impl RngCore,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    value: f64,
) -> Ellipse {
    let theta = draw(rng) * std::f64::consts::TAU;
    Ellipse {
        cx,
        cy,
        a,
        b,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
        value,
    }
}

/// Generate `count` phantom slices, one per derived seed stream: a large
/// head ellipse at mid intensity, one to `ellipse_count` interior tissue
/// ellipses, one bright lesion blob, plus Gaussian noise, rasterized with
/// 2x2 supersampling and normalized to `[-1, 1]`. Bit-identical for a
/// given parameter set.
pub fn phantom_generate<E: Scalar>(
    params: &PhantomParams,
    count: usize,
) -> Result<Vec<SliceRecord<E>>> {
    params.validate()?;
    let res = params.resolution;
    let resf = res as f64;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = child_stream(params.seed, "phantom", i as u64);
        let mut shapes: Vec<Ellipse> = Vec::new();

        // head outline: large, slightly jittered, mid intensity
        let hx = resf * (0.5 + 0.05 * (draw(&mut rng) * 2.0 - 1.0));
        let hy = resf * (0.5 + 0.05 * (draw(&mut rng) * 2.0 - 1.0));
        let ha = resf * (0.33 + 0.10 * draw(&mut rng));
        let hb = resf * (0.33 + 0.10 * draw(&mut rng));
        let hv = 0.45 + 0.10 * draw(&mut rng);
        shapes.push(rotated(&mut rng, hx, hy, ha, hb, hv));

        // interior tissue ellipses
        let tissue = 1 + ((draw(&mut rng) * params.ellipse_count as f64) as usize)
            .min(params.ellipse_count - 1);
        for _ in 0..tissue {
            let cx = hx + resf * 0.15 * (draw(&mut rng) * 2.0 - 1.0);
            let cy = hy + resf * 0.15 * (draw(&mut rng) * 2.0 - 1.0);
            let a = resf * (0.04 + 0.12 * draw(&mut rng));
            let b = resf * (0.04 + 0.12 * draw(&mut rng));
            let v = 0.25 + 0.45 * draw(&mut rng);
            shapes.push(rotated(&mut rng, cx, cy, a, b, v));
        }

        // bright lesion analogue
        let cx = hx + resf * 0.20 * (draw(&mut rng) * 2.0 - 1.0);
        let cy = hy + resf * 0.20 * (draw(&mut rng) * 2.0 - 1.0);
        let a = resf * (0.04 + 0.08 * draw(&mut rng));
        let b = resf * (0.04 + 0.08 * draw(&mut rng));
        shapes.push(rotated(&mut rng, cx, cy, a, b, params.tumor_intensity));

        // rasterize with 2x2 supersampling, later shapes painting on top
        let mut raw = vec![0.0f64; res * res];
        for r in 0..res {
            for c in 0..res {
                let mut acc = 0.0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let x = c as f64 + ox;
                    let y = r as f64 + oy;
                    let mut v = 0.0;
                    for s in &shapes {
                        if s.contains(x, y) {
                            v = s.value;
                        }
                    }
                    acc += v;
                }
                raw[r * res + c] = acc * 0.25;
            }
        }

        if params.noise_sigma > 0.0 {
            for v in &mut raw {
                *v = (*v + params.noise_sigma * standard_normal::<f64>(&mut rng))
                    .clamp(0.0, 1.0);
            }
        }

        let raw_t = Tensor::from_vec(&[1, res, res], raw.iter().map(|&v| E::lit(v)).collect())?;
        let (pixels, _constant) = normalize_intensity(&raw_t)?;
        records.push(SliceRecord {
            pixels,
            source_id: format!("phantom-{i:04}"),
            slice_index: 64,
            original_extent: (res, res),
            pad_applied: (0, 0),
        });
    }
    Ok(records)
}
