//! Layer vocabulary with hand-written forward and reverse passes.
//!
//! Activations are channel-major `(c, h, w)` tensors of f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{upsample_bilinear, upsample_bilinear_adjoint, Grid, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Converts interleaved `(h, w, c)` samples into a channel-major tensor.
    pub fn from_hwc(h: usize, w: usize, c: usize, hwc: &[f64]) -> Self {
        let mut data = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = hwc[p * c + ch];
            }
        }
        Tensor { c, h, w, data }
    }

    pub fn to_hwc(&self) -> Vec<f64> {
        let hw = self.h * self.w;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..hw {
            for ch in 0..self.c {
                out[p * self.c + ch] = self.data[ch * hw + p];
            }
        }
        out
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[ch * hw..(ch + 1) * hw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, zero padding `kernel / 2`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    GlobalAvgPool,
    /// Fully connected over the flattened input.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Sigmoid,
    /// Bilinear resampling by an integer factor.
    Upsample {
        factor: usize,
    },
}

impl LayerSpec {
    pub fn code(&self) -> u32 {
        match self {
            LayerSpec::Conv { .. } => 1,
            LayerSpec::Relu => 2,
            LayerSpec::GlobalAvgPool => 3,
            LayerSpec::Dense { .. } => 4,
            LayerSpec::Sigmoid => 5,
            LayerSpec::Upsample { .. } => 6,
        }
    }

    /// Integer header describing the layer; inverse of [`LayerSpec::from_header`].
    pub fn header(&self) -> Vec<u32> {
        let d = |v: usize| v as u32;
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                vec![d(in_channels), d(out_channels), d(kernel), d(stride)]
            }
            LayerSpec::Dense { inputs, outputs } => vec![d(inputs), d(outputs)],
            LayerSpec::Upsample { factor } => vec![d(factor)],
            _ => vec![],
        }
    }

    pub fn from_header(code: u32, dims: &[u32]) -> Result<Self> {
        let d = |i: usize| dims[i] as usize;
        let want = |n: usize| {
            if dims.len() == n {
                Ok(())
            } else {
                Err(Error::format(format!("layer code {code} expects {n} dims, got {}", dims.len())))
            }
        };
        Ok(match code {
            1 => {
                want(4)?;
                LayerSpec::Conv { in_channels: d(0), out_channels: d(1), kernel: d(2), stride: d(3) }
            }
            2 => {
                want(0)?;
                LayerSpec::Relu
            }
            3 => {
                want(0)?;
                LayerSpec::GlobalAvgPool
            }
            4 => {
                want(2)?;
                LayerSpec::Dense { inputs: d(0), outputs: d(1) }
            }
            5 => {
                want(0)?;
                LayerSpec::Sigmoid
            }
            6 => {
                want(1)?;
                LayerSpec::Upsample { factor: d(0) }
            }
            other => return Err(Error::format(format!("unknown layer code {other}"))),
        })
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            LayerSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride } => {
                if c != in_channels {
                    return Err(Error::dimension(format!("conv expects {in_channels} channels, got {c}")));
                }
                if kernel == 0 || kernel % 2 == 0 || stride == 0 {
                    return Err(Error::dimension("conv kernel must be odd and stride positive"));
                }
                let p = kernel / 2;
                if h + 2 * p < kernel || w + 2 * p < kernel {
                    return Err(Error::dimension("conv input smaller than kernel"));
                }
                Ok((out_channels, (h + 2 * p - kernel) / stride + 1, (w + 2 * p - kernel) / stride + 1))
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok((c, h, w)),
            LayerSpec::GlobalAvgPool => Ok((c, 1, 1)),
            LayerSpec::Dense { inputs, outputs } => {
                if c * h * w != inputs {
                    return Err(Error::dimension(format!("dense expects {inputs} inputs, got {}", c * h * w)));
                }
                Ok((outputs, 1, 1))
            }
            LayerSpec::Upsample { factor } => {
                if factor == 0 {
                    return Err(Error::dimension("upsample factor must be positive"));
                }
                Ok((c, h * factor, w * factor))
            }
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 1,
        }
    }
}

/// A layer and its parameters (weights row-major by output unit, then biases).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<f64>,
}

/// `c = a·b + beta·c` for row-major buffers; `ta`/`tb` read the operand transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

fn im2col(x: &Tensor, kernel: usize, stride: usize, oh: usize, ow: usize, cols: &mut Vec<f64>) {
    let p = kernel / 2;
    cols.clear();
    cols.reserve(x.c * kernel * kernel * oh * ow);
    for ci in 0..x.c {
        let plane = x.plane(ci);
        for ky in 0..kernel {
            for kx in 0..kernel {
                let (lo, hi) = valid_columns(x.w, ow, kx, p, stride);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    if iy < 0 || iy >= x.h as isize || lo == hi {
                        cols.resize(cols.len() + ow, 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..][..x.w];
                    cols.resize(cols.len() + lo, 0.0);
                    let first = lo * stride + kx - p;
                    if stride == 1 {
                        cols.extend_from_slice(&src[first..first + hi - lo]);
                    } else {
                        let src = &src[first..=first + (hi - lo - 1) * stride];
                        cols.extend((0..hi - lo).map(|j| src[j * stride]));
                    }
                    cols.resize(cols.len() + ow - hi, 0.0);
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - p` lies in `0..w`.
fn valid_columns(w: usize, ow: usize, kx: usize, p: usize, stride: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kx).div_ceil(stride).min(ow);
    let hi = (w + p).saturating_sub(kx).div_ceil(stride).clamp(lo, ow);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kernel: usize, stride: usize, oh: usize, ow: usize) -> Tensor {
    let p = kernel / 2;
    let n = oh * ow;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * h * w..][..h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &cols[((ci * kernel + ky) * kernel + kx) * n..][..n];
                let (lo, hi) = valid_columns(w, ow, kx, p, stride);
                if lo == hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    let first = lo * stride + kx - p;
                    if stride == 1 {
                        for (d, s) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        let dst = &mut dst[first..=first + (src.len() - 1) * stride];
                        for (j, s) in src.iter().enumerate() {
                            dst[j * stride] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Layer {
    pub fn new(spec: LayerSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::dimension(format!(
                "{spec:?} needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        Ok(Layer { spec, params })
    }

    /// He-normal weights and zero biases.
    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Self {
        let n = spec.param_count();
        let bias = match spec {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        };
        let std = (2.0 / spec.fan_in() as f64).sqrt();
        let mut params: Vec<f64> = (0..n - bias).map(|_| rng.normal() * std).collect();
        params.resize(n, 0.0);
        Layer { spec, params }
    }

    fn split(&self) -> (&[f64], &[f64]) {
        let bias = match self.spec {
            LayerSpec::Conv { out_channels, .. } => out_channels,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        };
        self.params.split_at(self.params.len() - bias)
    }

    pub fn weights(&self) -> &[f64] {
        self.split().0
    }

    pub fn biases(&self) -> &[f64] {
        self.split().1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (oc, oh, ow) = self.spec.output_shape(x.shape())?;
        Ok(match self.spec {
            LayerSpec::Conv { kernel, stride, .. } => {
                let (wt, b) = self.split();
                let n = oh * ow;
                let mut data = Vec::with_capacity(oc * n);
                for &bv in b {
                    data.resize(data.len() + n, bv);
                }
                SCRATCH.with_borrow_mut(|(cols, _)| {
                    im2col(x, kernel, stride, oh, ow, cols);
                    gemm(oc, x.c * kernel * kernel, n, wt, false, cols, false, 1.0, &mut data);
                });
                Tensor { c: oc, h: oh, w: ow, data }
            }
            LayerSpec::Relu => Tensor { data: x.data.iter().map(|&v| v.max(0.0)).collect(), ..x.clone() },
            LayerSpec::Sigmoid => Tensor { data: x.data.iter().map(|&v| sigmoid(v)).collect(), ..x.clone() },
            LayerSpec::GlobalAvgPool => {
                let hw = (x.h * x.w) as f64;
                let data = (0..x.c).map(|c| x.plane(c).iter().sum::<f64>() / hw).collect();
                Tensor { c: x.c, h: 1, w: 1, data }
            }
            LayerSpec::Dense { inputs, outputs } => {
                let (wt, b) = self.split();
                let mut data = b.to_vec();
                gemm(outputs, inputs, 1, wt, false, &x.data, false, 1.0, &mut data);
                Tensor { c: outputs, h: 1, w: 1, data }
            }
            LayerSpec::Upsample { .. } => {
                let mut out = Tensor::zeros(oc, oh, ow);
                for c in 0..x.c {
                    let g = Grid::from_vec(x.h, x.w, x.plane(c).to_vec())?;
                    let up = upsample_bilinear(&g, oh, ow);
                    out.data[c * oh * ow..][..oh * ow].copy_from_slice(up.data());
                }
                out
            }
        })
    }

    /// Reverse pass. `x` and `y` are this layer's input and output; returns the
    /// input gradient and accumulates into `dparams` when given.
    pub fn backward(&self, x: &Tensor, y: &Tensor, dy: &Tensor, dparams: Option<&mut [f64]>) -> Tensor {
        match self.spec {
            LayerSpec::Conv { kernel, stride, .. } => {
                let (oh, ow) = (y.h, y.w);
                let n = oh * ow;
                let kk = x.c * kernel * kernel;
                let (wt, _) = self.split();
                SCRATCH.with_borrow_mut(|(cols, dcols)| {
                    if let Some(dp) = dparams {
                        im2col(x, kernel, stride, oh, ow, cols);
                        let (dw, db) = dp.split_at_mut(wt.len());
                        gemm(y.c, n, kk, &dy.data, false, cols, true, 1.0, dw);
                        for (g, row) in db.iter_mut().zip(dy.data.chunks(n)) {
                            *g += row.iter().sum::<f64>();
                        }
                    }
                    // beta = 0 overwrites every entry, so stale contents are harmless
                    dcols.resize(kk * n, 0.0);
                    gemm(kk, y.c, n, wt, true, &dy.data, false, 0.0, dcols);
                    col2im(dcols, x.c, x.h, x.w, kernel, stride, oh, ow)
                })
            }
            LayerSpec::Relu => Tensor {
                data: x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
                ..x.clone()
            },
            LayerSpec::Sigmoid => {
                Tensor { data: y.data.iter().zip(&dy.data).map(|(&s, &g)| g * s * (1.0 - s)).collect(), ..x.clone() }
            }
            LayerSpec::GlobalAvgPool => {
                let hw = x.h * x.w;
                let mut out = Tensor::zeros(x.c, x.h, x.w);
                for c in 0..x.c {
                    out.data[c * hw..][..hw].fill(dy.data[c] / hw as f64);
                }
                out
            }
            LayerSpec::Dense { inputs, outputs } => {
                let (wt, _) = self.split();
                if let Some(dp) = dparams {
                    let (dw, db) = dp.split_at_mut(wt.len());
                    gemm(outputs, 1, inputs, &dy.data, false, &x.data, false, 1.0, dw);
                    for (g, d) in db.iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                }
                let mut dx = vec![0.0; inputs];
                gemm(inputs, outputs, 1, wt, true, &dy.data, false, 0.0, &mut dx);
                Tensor { c: x.c, h: x.h, w: x.w, data: dx }
            }
            LayerSpec::Upsample { .. } => {
                let mut out = Tensor::zeros(x.c, x.h, x.w);
                for c in 0..x.c {
                    let g = Grid::from_vec(y.h, y.w, dy.plane(c).to_vec()).expect("shape from forward");
                    let down = upsample_bilinear_adjoint(&g, x.h, x.w);
                    out.data[c * x.h * x.w..][..x.h * x.w].copy_from_slice(down.data());
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        Tensor { c, h, w, data: (0..c * h * w).map(|_| rng.normal()).collect() }
    }

    /// Checks the adjoint identity <dy, J dx> = <J^T dy, dx> via finite differences.
    fn check_layer(spec: LayerSpec, shape: (usize, usize, usize)) {
        let mut rng = Rng::new(3);
        let layer = Layer::init(spec, &mut rng);
        let layer = Layer { params: layer.params.iter().map(|p| p + 0.1 * rng.normal()).collect(), ..layer };
        let x = random_tensor(shape.0, shape.1, shape.2, &mut rng);
        let y = layer.forward(&x).unwrap();
        let dy = random_tensor(y.c, y.h, y.w, &mut rng);
        let mut dp = vec![0.0; layer.params.len()];
        let dx = layer.backward(&x, &y, &dy, Some(&mut dp));
        let loss = |l: &Layer, x: &Tensor| -> f64 {
            l.forward(x).unwrap().data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{spec:?} dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for i in (0..layer.params.len()).step_by(5) {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.params[i] += h;
            lm.params[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!((fd - dp[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{spec:?} dp[{i}] {fd} vs {}", dp[i]);
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        check_layer(LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: 3, stride: 2 }, (2, 7, 6));
        check_layer(LayerSpec::Conv { in_channels: 2, out_channels: 2, kernel: 3, stride: 1 }, (2, 5, 5));
        check_layer(LayerSpec::Conv { in_channels: 3, out_channels: 1, kernel: 1, stride: 1 }, (3, 4, 4));
        check_layer(LayerSpec::Dense { inputs: 12, outputs: 4 }, (3, 2, 2));
        check_layer(LayerSpec::Sigmoid, (2, 3, 3));
        check_layer(LayerSpec::GlobalAvgPool, (3, 4, 5));
        check_layer(LayerSpec::Upsample { factor: 4 }, (2, 3, 3));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Rng::new(11);
        let spec = LayerSpec::Conv { in_channels: 2, out_channels: 2, kernel: 3, stride: 2 };
        let layer = Layer::init(spec, &mut rng);
        let x = random_tensor(2, 5, 6, &mut rng);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), (2, 3, 3));
        let (w, b) = (layer.weights(), layer.biases());
        for oc in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = b[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    s += w[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                        * x.data[(ic * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((s - y.data[(oc * 3 + oy) * 3 + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relu_backward_masks_negative_inputs() {
        let x = Tensor { c: 1, h: 1, w: 3, data: vec![-1.0, 0.5, 2.0] };
        let layer = Layer::new(LayerSpec::Relu, vec![]).unwrap();
        let y = layer.forward(&x).unwrap();
        let dy = Tensor { data: vec![1.0, 1.0, 1.0], ..x.clone() };
        assert_eq!(layer.backward(&x, &y, &dy, None).data, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn header_roundtrip() {
        for spec in [
            LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: 3, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { inputs: 32, outputs: 16 },
            LayerSpec::Sigmoid,
            LayerSpec::Upsample { factor: 4 },
        ] {
            assert_eq!(LayerSpec::from_header(spec.code(), &spec.header()).unwrap(), spec);
        }
    }
}
