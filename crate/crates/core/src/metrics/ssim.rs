//! Structural similarity (SSIM) and its multi-scale extension.
//!
//! SSIM is computed with Gaussian-windowed local statistics on the valid
//! region (no padding) and is fully differentiable, so the training
//! objectives can reuse it. MS-SSIM is an evaluation-only quantity: per
//! scale the luminance/contrast-structure means are tensor computations,
//! and only the final weighted-power combination happens in plain `f64`.
//!
//! All routines expect grayscale image batches shaped `[N,1,H,W]` with
//! pixel values in `[0,1]`; [`to_unit_range`] maps the model's `[-1,1]`
//! output range onto that domain.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Local-statistics window and stability constants for SSIM.
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub window_size: usize,
    pub window_sigma: f64,
    /// Dynamic range `L` of the pixel values (1.0 on `[0,1]` images).
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            window_size: 11,
            window_sigma: 1.5,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range) * (self.k1 * self.dynamic_range)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range) * (self.k2 * self.dynamic_range)
    }

    fn validate(&self) -> Result<()> {
        if self.window_size % 2 == 0 || self.window_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "ssim window size must be odd, got {}",
                self.window_size
            )));
        }
        if self.window_sigma <= 0.0 || self.c1() <= 0.0 || self.c2() <= 0.0 {
            return Err(Error::InvalidArgument(
                "ssim constants must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Default per-scale weights for 5-scale MS-SSIM (finest to coarsest).
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Affine remap from the model's `[-1,1]` range to `[0,1]`; differentiable.
pub fn to_unit_range<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    x.add_const(E::one())?.mul_const(E::lit(0.5))
}

/// Normalized 2-D Gaussian window of odd size; sums to 1.
pub fn gaussian_window<E: Scalar>(size: usize, sigma: f64) -> Result<Tensor<E>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian window size must be odd, got {}",
            size
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument("gaussian sigma must be positive".into()));
    }
    let center = (size / 2) as f64;
    let one_d: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut grid = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            grid[i * size + j] = one_d[i] * one_d[j];
        }
    }
    let total: f64 = grid.iter().sum();
    let data: Vec<E> = grid.iter().map(|v| E::lit(v / total)).collect();
    Tensor::from_vec(&[size, size], data)
}

fn validate_pair<E: Scalar>(x: &Tensor<E>, y: &Tensor<E>, params: &SsimParams) -> Result<()> {
    params.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "ssim",
            format!("image shapes differ: {:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(
            "ssim",
            format!("expected [N,1,H,W] grayscale batch, got {:?}", s),
        ));
    }
    if s[2] < params.window_size || s[3] < params.window_size {
        return Err(Error::shape(
            "ssim",
            format!(
                "image {}x{} smaller than the {} window",
                s[2], s[3], params.window_size
            ),
        ));
    }
    let slack = E::lit(1e-9);
    for t in [x, y] {
        if t.data()
            .iter()
            .any(|&v| v < -slack || v > E::one() + slack)
        {
            return Err(Error::InvalidArgument(
                "ssim expects pixel values in [0,1]; remap model output first".into(),
            ));
        }
    }
    Ok(())
}

/// Windowed local means, variances and covariance over the valid region.
struct LocalStats<E: Scalar> {
    mu_x: Tensor<E>,
    mu_y: Tensor<E>,
    var_x: Tensor<E>,
    var_y: Tensor<E>,
    cov: Tensor<E>,
}

fn local_stats<E: Scalar>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    params: &SsimParams,
) -> Result<LocalStats<E>> {
    let k = params.window_size;
    let window = gaussian_window::<E>(k, params.window_sigma)?.reshape(&[1, 1, k, k])?;
    let mu_x = x.conv2d(&window, 1, 0)?;
    let mu_y = y.conv2d(&window, 1, 0)?;
    let var_x = x.square()?.conv2d(&window, 1, 0)?.sub(&mu_x.square()?)?;
    let var_y = y.square()?.conv2d(&window, 1, 0)?.sub(&mu_y.square()?)?;
    let cov = x.mul(y)?.conv2d(&window, 1, 0)?.sub(&mu_x.mul(&mu_y)?)?;
    Ok(LocalStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    })
}

/// Per-pixel SSIM map over the valid region, shape
/// `[N,1,H-k+1,W-k+1]`; differentiable.
pub fn ssim_map<E: Scalar>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    params: &SsimParams,
) -> Result<Tensor<E>> {
    validate_pair(x, y, params)?;
    let s = local_stats(x, y, params)?;
    let c1 = E::lit(params.c1());
    let c2 = E::lit(params.c2());
    let l_num = s.mu_x.mul(&s.mu_y)?.mul_const(E::lit(2.0))?.add_const(c1)?;
    let l_den = s.mu_x.square()?.add(&s.mu_y.square()?)?.add_const(c1)?;
    let cs_num = s.cov.mul_const(E::lit(2.0))?.add_const(c2)?;
    let cs_den = s.var_x.add(&s.var_y)?.add_const(c2)?;
    l_num.mul(&cs_num)?.div(&l_den.mul(&cs_den)?)
}

/// Mean SSIM over the valid region and batch, as a rank-0 tensor;
/// differentiable with respect to both images.
pub fn ssim<E: Scalar>(x: &Tensor<E>, y: &Tensor<E>, params: &SsimParams) -> Result<Tensor<E>> {
    ssim_map(x, y, params)?.mean_all()
}

/// Mean luminance and contrast-structure terms of one scale, as scalars.
fn scale_means<E: Scalar>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    params: &SsimParams,
) -> Result<(f64, f64)> {
    validate_pair(x, y, params)?;
    let s = local_stats(x, y, params)?;
    let c1 = E::lit(params.c1());
    let c2 = E::lit(params.c2());
    let l = s
        .mu_x
        .mul(&s.mu_y)?
        .mul_const(E::lit(2.0))?
        .add_const(c1)?
        .div(&s.mu_x.square()?.add(&s.mu_y.square()?)?.add_const(c1)?)?
        .mean_all()?;
    let cs = s
        .cov
        .mul_const(E::lit(2.0))?
        .add_const(c2)?
        .div(&s.var_x.add(&s.var_y)?.add_const(c2)?)?
        .mean_all()?;
    Ok((l.item().to_f64(), cs.item().to_f64()))
}

/// Number of MS-SSIM scales feasible for an `h x w` image: each scale
/// after the first halves the extents (which must stay even to pool), and
/// the coarsest image must still cover the window.
pub fn feasible_scales(h: usize, w: usize, params: &SsimParams, max_scales: usize) -> usize {
    let (mut h, mut w) = (h, w);
    let mut scales = 0;
    while scales < max_scales && h >= params.window_size && w >= params.window_size {
        scales += 1;
        if h % 2 != 0 || w % 2 != 0 {
            break;
        }
        h /= 2;
        w /= 2;
    }
    scales
}

/// Multi-scale SSIM with up to `weights.len()` scales. Downsampling is a
/// 2x2 average pool; the luminance term applies at the coarsest scale
/// only. On images too small for the full scale count, the largest
/// feasible count is used and the leading weights are renormalized to
/// sum 1. Evaluation-only (not differentiable end to end).
pub fn ms_ssim<E: Scalar>(
    x: &Tensor<E>,
    y: &Tensor<E>,
    params: &SsimParams,
    weights: &[f64],
) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("ms_ssim needs at least one weight".into()));
    }
    validate_pair(x, y, params)?;
    let s = x.shape();
    let scales = feasible_scales(s[2], s[3], params, weights.len());
    if scales == 0 {
        return Err(Error::shape(
            "ms_ssim",
            format!(
                "image {}x{} smaller than the {} window",
                s[2], s[3], params.window_size
            ),
        ));
    }
    let weight_sum: f64 = weights[..scales].iter().sum();
    let mut cur_x = x.detach();
    let mut cur_y = y.detach();
    let mut result = 1.0;
    for (j, &wj) in weights[..scales].iter().enumerate() {
        let (l, cs) = scale_means(&cur_x, &cur_y, params)?;
        let w = wj / weight_sum;
        // Negative means are clamped: a fractional power of a negative
        // base is undefined, and negative similarity at one scale means
        // total dissimilarity.
        result *= cs.max(0.0).powf(w);
        if j + 1 == scales {
            result *= l.max(0.0).powf(w);
        } else {
            cur_x = cur_x.avgpool2x()?;
            cur_y = cur_y.avgpool2x()?;
        }
    }
    if !result.is_finite() {
        return Err(Error::NonFinite { op: "ms_ssim" });
    }
    Ok(result)
}
