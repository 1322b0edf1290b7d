//! Tile-based front-to-back alpha compositing and its reverse pass.

use rayon::prelude::*;

use super::image::Image;
use crate::error::{Error, Result};

pub const TILE_SIZE: usize = 16;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius beyond which a splat does not touch a pixel.
pub const CUTOFF_Q: f64 = 9.0;

/// A projected Gaussian as seen by the compositor.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterSplat {
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the inverse 2D covariance.
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub radius: f64,
}

/// Gradients on one splat's fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// What the reverse pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct RasterState {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Splat indices in depth order.
    pub order: Vec<usize>,
    /// Per tile, positions into `order` of the splats overlapping it.
    tile_lists: Vec<Vec<u32>>,
    final_t: Vec<f64>,
    /// Per pixel, the tile-list length up to and including the last splat
    /// that contributed.
    n_contrib: Vec<u32>,
    num_splats: usize,
}

impl RasterState {
    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }

    fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.tile_size)
    }
}

/// Depth order with the splat index as tiebreaker.
pub fn depth_order(splats: &[RasterSplat]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    order
}

#[inline]
fn falloff(s: &RasterSplat, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if !(q <= CUTOFF_Q) {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some((dx, dy, g, (s.opacity * g).min(MAX_ALPHA)))
}

pub fn rasterize(
    splats: &[RasterSplat],
    width: usize,
    height: usize,
    tile_size: usize,
    background: [f64; 3],
) -> (Image, RasterState) {
    let order = depth_order(splats);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, &i) in order.iter().enumerate() {
        let s = &splats[i];
        let x0 = ((s.mean[0] - s.radius) / tile_size as f64).floor().max(0.0) as usize;
        let y0 = ((s.mean[1] - s.radius) / tile_size as f64).floor().max(0.0) as usize;
        let x1 = (((s.mean[0] + s.radius) / tile_size as f64).ceil().max(0.0) as usize).min(tiles_x);
        let y1 = (((s.mean[1] + s.radius) / tile_size as f64).ceil().max(0.0) as usize).min(tiles_y);
        for ty in y0..y1 {
            for tx in x0..x1 {
                tile_lists[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let blocks: Vec<Vec<([f64; 3], f64, u32)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &tile_lists[tile];
            let mut out = Vec::with_capacity(tile_size * tile_size);
            for y in ty * tile_size..((ty + 1) * tile_size).min(height) {
                for x in tx * tile_size..((tx + 1) * tile_size).min(width) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut rgb = [0.0; 3];
                    let mut last = 0u32;
                    for (k, &pos) in list.iter().enumerate() {
                        let s = &splats[order[pos as usize]];
                        let Some((_, _, _, alpha)) = falloff(s, px, py) else { continue };
                        if alpha < MIN_ALPHA {
                            continue;
                        }
                        let next_t = t * (1.0 - alpha);
                        if next_t < MIN_TRANSMITTANCE {
                            break;
                        }
                        for c in 0..3 {
                            rgb[c] += s.color[c] * alpha * t;
                        }
                        t = next_t;
                        last = k as u32 + 1;
                    }
                    for c in 0..3 {
                        rgb[c] += t * background[c];
                    }
                    out.push((rgb, t, last));
                }
            }
            out
        })
        .collect();

    let mut image = Image::zeros(width, height);
    let mut final_t = vec![0.0; width * height];
    let mut n_contrib = vec![0u32; width * height];
    for (tile, block) in blocks.into_iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut it = block.into_iter();
        for y in ty * tile_size..((ty + 1) * tile_size).min(height) {
            for x in tx * tile_size..((tx + 1) * tile_size).min(width) {
                let (rgb, t, last) = it.next().expect("block covers its tile");
                image.set_pixel(x, y, rgb);
                final_t[y * width + x] = t;
                n_contrib[y * width + x] = last;
            }
        }
    }
    let state = RasterState {
        width,
        height,
        tile_size,
        background,
        order,
        tile_lists,
        final_t,
        n_contrib,
        num_splats: splats.len(),
    };
    (image, state)
}

/// Gradients of every splat's fields given `∂L/∂image`.
pub fn rasterize_backward(splats: &[RasterSplat], state: &RasterState, grad_image: &Image) -> Result<Vec<SplatGrad>> {
    if splats.len() != state.num_splats {
        return Err(Error::Contract(format!(
            "backward got {} splats, forward had {}",
            splats.len(),
            state.num_splats
        )));
    }
    if grad_image.width != state.width || grad_image.height != state.height {
        return Err(Error::Contract(format!(
            "gradient image is {}×{}, forward rendered {}×{}",
            grad_image.width, grad_image.height, state.width, state.height
        )));
    }
    let (width, height, tile_size) = (state.width, state.height, state.tile_size);
    let tiles_x = state.tiles_x();
    let bg = state.background;
    let order = &state.order;

    let per_tile: Vec<Vec<SplatGrad>> = state
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut grads = vec![SplatGrad::default(); list.len()];
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            for y in ty * tile_size..((ty + 1) * tile_size).min(height) {
                for x in tx * tile_size..((tx + 1) * tile_size).min(width) {
                    let pix = y * width + x;
                    let d_pix = grad_image.pixel(x, y);
                    if d_pix == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t_final = state.final_t[pix];
                    let bg_dot: f64 = (0..3).map(|c| bg[c] * d_pix[c]).sum();
                    let mut t = t_final;
                    let mut accum = [0.0; 3];
                    let mut last_alpha = 0.0;
                    let mut last_color = [0.0; 3];
                    for k in (0..state.n_contrib[pix] as usize).rev() {
                        let s = &splats[order[list[k] as usize]];
                        let Some((dx, dy, g, alpha)) = falloff(s, px, py) else { continue };
                        if alpha < MIN_ALPHA {
                            continue;
                        }
                        t /= 1.0 - alpha;
                        let gr = &mut grads[k];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            gr.color[c] += alpha * t * d_pix[c];
                            accum[c] = last_alpha * last_color[c] + (1.0 - last_alpha) * accum[c];
                            d_alpha += (s.color[c] - accum[c]) * d_pix[c];
                        }
                        d_alpha *= t;
                        d_alpha -= t_final / (1.0 - alpha) * bg_dot;
                        last_alpha = alpha;
                        last_color = s.color;
                        if s.opacity * g >= MAX_ALPHA {
                            continue;
                        }
                        gr.opacity += g * d_alpha;
                        let d_q = -0.5 * g * s.opacity * d_alpha;
                        let [a, b, c] = s.conic;
                        gr.mean[0] -= d_q * (2.0 * a * dx + 2.0 * b * dy);
                        gr.mean[1] -= d_q * (2.0 * b * dx + 2.0 * c * dy);
                        gr.conic[0] += d_q * dx * dx;
                        gr.conic[1] += d_q * 2.0 * dx * dy;
                        gr.conic[2] += d_q * dy * dy;
                    }
                }
            }
            grads
        })
        .collect();

    let mut out = vec![SplatGrad::default(); splats.len()];
    for (list, grads) in state.tile_lists.iter().zip(&per_tile) {
        for (&pos, g) in list.iter().zip(grads) {
            out[order[pos as usize]].add(g);
        }
    }
    Ok(out)
}
