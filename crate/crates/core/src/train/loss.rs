//! Photometric, structural, and motion losses with their gradients.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_OMEGA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub d_ssim: f64,
    pub motion: f64,
    pub total: f64,
    pub lambda: f64,
    pub omega: f64,
}

impl LossReport {
    pub fn assemble(l1: f64, d_ssim: f64, motion: f64, lambda: f64, omega: f64) -> Self {
        Self {
            l1,
            d_ssim,
            motion,
            total: (1.0 - lambda) * l1 + lambda * d_ssim + omega * motion,
            lambda,
            omega,
        }
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Same-size separable filtering of one plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, &t) in taps.iter().enumerate() {
            let yy = y as isize + k as isize - r;
            if yy < 0 || yy as usize >= h {
                continue;
            }
            let src = &tmp[yy as usize * w..(yy as usize + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

struct SsimMaps {
    map: Vec<f64>,
    /// `∂S/∂(μx, E[x²], E[xy])` per pixel.
    partials: Option<[Vec<f64>; 3]>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64], with_partials: bool) -> SsimMaps {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = blur(x, w, h, taps);
    let mu_y = blur(y, w, h, taps);
    let exx = blur(&sq(x, x), w, h, taps);
    let eyy = blur(&sq(y, y), w, h, taps);
    let exy = blur(&sq(x, y), w, h, taps);
    let n = w * h;
    let mut map = vec![0.0; n];
    let mut partials = with_partials.then(|| [vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        map[i] = s;
        if let Some(p) = partials.as_mut() {
            let da1 = a2 / (b1 * b2);
            let da2 = a1 / (b1 * b2);
            let db1 = -s / b1;
            let db2 = -s / b2;
            p[0][i] = 2.0 * my * (da1 - da2) + 2.0 * mx * (db1 - db2);
            p[1][i] = db2;
            p[2][i] = 2.0 * da2;
        }
    }
    SsimMaps {
        map,
        partials,
    }
}

/// Mean SSIM over pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for c in 0..3 {
        let m = ssim_channel(&plane(a, c), &plane(b, c), w, h, &taps, false);
        total += m.map.iter().sum::<f64>();
    }
    Ok(total / (3 * w * h) as f64)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_same(a, b)?;
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (w, h) = (a.width, a.height);
    let scale = 1.0 / (3 * w * h) as f64;
    let mut grad = Image::zeros(w, h);
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (plane(a, c), plane(b, c));
        let m = ssim_channel(&x, &y, w, h, &taps, true);
        total += m.map.iter().sum::<f64>();
        let [g_mu, g_xx, g_xy] = m.partials.expect("requested");
        // The symmetric zero-padded filter is its own adjoint.
        let g_mu = blur(&g_mu, w, h, &taps);
        let g_xx = blur(&g_xx, w, h, &taps);
        let g_xy = blur(&g_xy, w, h, &taps);
        for i in 0..w * h {
            grad.data[i * 3 + c] = scale * (g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]);
        }
    }
    Ok((total * scale, grad))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.data.len().max(1) as f64)
}

/// `(l1, 1 − SSIM)`.
pub fn photometric_loss(render: &Image, target: &Image) -> Result<(f64, f64)> {
    Ok((l1(render, target)?, 1.0 - ssim(render, target)?))
}

/// Mean absolute offset over all `N × 3` entries.
pub fn motion_loss(dx: &Tensor) -> f64 {
    if dx.is_empty() {
        return 0.0;
    }
    dx.data().iter().map(|v| v.abs()).sum::<f64>() / dx.len() as f64
}

pub fn motion_loss_grad(dx: &Tensor) -> Tensor {
    let n = dx.len().max(1) as f64;
    let data = dx.data().iter().map(|&v| sign(v) / n).collect();
    Tensor::new(dx.shape().to_vec(), data).expect("same shape")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Image losses and the gradient of `(1−λ)·l1 + λ·(1−SSIM)` on the render.
pub fn image_loss_with_grad(render: &Image, target: &Image, lambda: f64) -> Result<(f64, f64, Image)> {
    let l1v = l1(render, target)?;
    let (s, gs) = ssim_with_grad(render, target)?;
    let n = render.data.len().max(1) as f64;
    let mut grad = gs;
    for ((g, p), q) in grad.data.iter_mut().zip(&render.data).zip(&target.data) {
        *g = (1.0 - lambda) * sign(p - q) / n - lambda * *g;
    }
    Ok((l1v, 1.0 - s, grad))
}
