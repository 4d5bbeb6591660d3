//! Distances, pooling, filtering and resampling on images and grids.

use serde::{Deserialize, Serialize};

use super::image::{Grid, Image, Samples};
use crate::error::{Error, Result};

pub const POOL_SIDE: usize = 16;

/// Mean of squared element differences.
pub fn mse<A: Samples + ?Sized, B: Samples + ?Sized>(a: &A, b: &B) -> Result<f64> {
    if a.sample_shape() != b.sample_shape() {
        return Err(Error::dimension(format!("mse shape mismatch: {:?} vs {:?}", a.sample_shape(), b.sample_shape())));
    }
    let mut n = 0usize;
    let mut acc = 0.0;
    for (x, y) in a.sample_values().zip(b.sample_values()) {
        let d = x - y;
        acc += d * d;
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(acc / n as f64)
}

/// A 16x16 grid of bin means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMap {
    grid: Grid,
}

impl PooledMap {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != POOL_SIDE * POOL_SIDE {
            return Err(Error::dimension(format!("pooled map needs 256 cells, got {}", values.len())));
        }
        Ok(PooledMap { grid: Grid::from_vec(POOL_SIDE, POOL_SIDE, values)? })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        self.grid.data()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid.get(row, col)
    }
}

impl Samples for PooledMap {
    fn sample_shape(&self) -> (usize, usize, usize) {
        self.grid.sample_shape()
    }

    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        self.grid.sample_values()
    }
}

/// Contiguous near-equal bins over `0..len`; leading bins absorb the remainder.
pub fn bin_edges(len: usize, bins: usize) -> Vec<(usize, usize)> {
    let base = len / bins;
    let extra = len % bins;
    let mut edges = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < extra);
        edges.push((start, start + size));
        start += size;
    }
    edges
}

pub fn pool_to_16x16(map: &Grid) -> Result<PooledMap> {
    let (h, w) = map.shape();
    if h < POOL_SIDE || w < POOL_SIDE {
        return Err(Error::dimension(format!("pooling needs at least 16x16, got {h}x{w}")));
    }
    let rows = bin_edges(h, POOL_SIDE);
    let cols = bin_edges(w, POOL_SIDE);
    let mut out = Vec::with_capacity(POOL_SIDE * POOL_SIDE);
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let mut acc = 0.0;
            for y in r0..r1 {
                for x in c0..c1 {
                    acc += map.get(y, x);
                }
            }
            out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    PooledMap::from_values(out)
}

/// Anisotropic total variation normalised by pixel count.
pub fn total_variation(map: &Grid) -> Result<f64> {
    let (h, w) = map.shape();
    if h < 2 || w < 2 {
        return Err(Error::dimension(format!("total variation needs at least 2x2, got {h}x{w}")));
    }
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            if x + 1 < w {
                acc += (v - map.get(y, x + 1)).abs();
            }
            if y + 1 < h {
                acc += (v - map.get(y + 1, x)).abs();
            }
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Subgradient of [`total_variation`] with respect to every cell.
pub fn total_variation_grad(map: &Grid) -> Grid {
    let (h, w) = map.shape();
    let norm = 1.0 / (h * w) as f64;
    let mut g = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            if x + 1 < w {
                let s = sign(v - map.get(y, x + 1)) * norm;
                g.data_mut()[y * w + x] += s;
                g.data_mut()[y * w + x + 1] -= s;
            }
            if y + 1 < h {
                let s = sign(v - map.get(y + 1, x)) * norm;
                g.data_mut()[y * w + x] += s;
                g.data_mut()[(y + 1) * w + x] -= s;
            }
        }
    }
    g
}

/// Gradient of the Huber-smoothed total variation: neighbour differences
/// below `eps` contribute `d / eps` instead of their sign. `eps = 0` gives
/// [`total_variation_grad`].
pub fn smooth_total_variation_grad(map: &Grid, eps: f64) -> Grid {
    if eps <= 0.0 {
        return total_variation_grad(map);
    }
    let (h, w) = map.shape();
    let norm = 1.0 / (h * w) as f64;
    let dg = |d: f64| d.clamp(-eps, eps) / eps * norm;
    let mut g = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            if x + 1 < w {
                let s = dg(v - map.get(y, x + 1));
                g.data_mut()[y * w + x] += s;
                g.data_mut()[y * w + x + 1] -= s;
            }
            if y + 1 < h {
                let s = dg(v - map.get(y + 1, x));
                g.data_mut()[y * w + x] += s;
                g.data_mut()[(y + 1) * w + x] -= s;
            }
        }
    }
    g
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalised 1-D Gaussian taps; `sigma <= 0` yields the identity kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 1e-6 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Support radius of [`gaussian_kernel`] in pixels.
pub fn gaussian_radius(sigma: f64) -> usize {
    gaussian_kernel(sigma).len() / 2
}

/// Separable clamp-to-edge convolution of an interleaved f64 buffer.
pub fn blur_interleaved(data: &[f64], h: usize, w: usize, c: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return data.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * data[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    out
}

pub fn blur_image(img: &Image, sigma: f64) -> Image {
    let (h, w, c) = img.shape();
    let out = blur_interleaved(&img.to_f64(), h, w, c, sigma);
    Image::from_f64_clamped(h, w, c, &out).expect("shape preserved")
}

/// Half-pixel-centred bilinear upsampling weights for one axis: for each
/// output index the two source indices and their weights.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let t = p - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Bilinear resampling of a grid to `(h, w)`.
pub fn upsample_bilinear(g: &Grid, h: usize, w: usize) -> Grid {
    let ty = bilinear_taps(g.height(), h);
    let tx = bilinear_taps(g.width(), w);
    let mut out = Grid::zeros(h, w);
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = g.get(y0, x0) * (1.0 - fx) + g.get(y0, x1) * fx;
            let bot = g.get(y1, x0) * (1.0 - fx) + g.get(y1, x1) * fx;
            out.set(y, x, top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: maps a gradient on the fine grid back to
/// the coarse `(h, w)` grid.
pub fn upsample_bilinear_adjoint(fine: &Grid, h: usize, w: usize) -> Grid {
    let ty = bilinear_taps(h, fine.height());
    let tx = bilinear_taps(w, fine.width());
    let mut out = Grid::zeros(h, w);
    let ow = w;
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = fine.get(y, x);
            let d = out.data_mut();
            d[y0 * ow + x0] += g * (1.0 - fy) * (1.0 - fx);
            d[y0 * ow + x1] += g * (1.0 - fy) * fx;
            d[y1 * ow + x0] += g * fy * (1.0 - fx);
            d[y1 * ow + x1] += g * fy * fx;
        }
    }
    out
}

/// 2x2 box downsampling (odd trailing row/column dropped).
pub fn downsample2(g: &Grid) -> Grid {
    let h = (g.height() / 2).max(1);
    let w = (g.width() / 2).max(1);
    Grid::from_fn(h, w, |y, x| {
        let y0 = (2 * y).min(g.height() - 1);
        let x0 = (2 * x).min(g.width() - 1);
        let y1 = (y0 + 1).min(g.height() - 1);
        let x1 = (x0 + 1).min(g.width() - 1);
        0.25 * (g.get(y0, x0) + g.get(y0, x1) + g.get(y1, x0) + g.get(y1, x1))
    })
}

fn gradient_magnitude(g: &Grid) -> Grid {
    let (h, w) = g.shape();
    Grid::from_fn(h, w, |y, x| {
        let xl = x.saturating_sub(1);
        let xr = (x + 1).min(w - 1);
        let yu = y.saturating_sub(1);
        let yd = (y + 1).min(h - 1);
        let dx = 0.5 * (g.get(y, xr) - g.get(y, xl));
        let dy = 0.5 * (g.get(yd, x) - g.get(yu, x));
        (dx * dx + dy * dy).sqrt()
    })
}

pub const PERCEPTUAL_SCALES: usize = 3;

/// Multi-scale structural distance in `[0, 1]`.
///
/// At each of three dyadic scales and per channel the term is the plain MSE
/// plus the gradient-magnitude MSE normalised by its maximum (0.5); the terms
/// are averaged and clamped.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mut total = 0.0;
    let mut terms = 0usize;
    for c in 0..a.channels() {
        let mut pa = a.plane(c);
        let mut pb = b.plane(c);
        for s in 0..PERCEPTUAL_SCALES {
            if s > 0 {
                pa = downsample2(&pa);
                pb = downsample2(&pb);
            }
            let plain = mse(&pa, &pb)?;
            let ga = gradient_magnitude(&pa);
            let gb = gradient_magnitude(&pb);
            let structural = mse(&ga, &gb)? / 0.5;
            total += plain + structural;
            terms += 1;
        }
    }
    Ok((total / terms as f64).clamp(0.0, 1.0))
}
