//! Frozen systems-under-test: a steering regressor and a segmentation
//! network, with layer taps and exact input gradients.

mod layers;
mod network;
mod train;
mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use layers::{Layer, LayerSpec, Tensor};
pub use network::Network;
pub use train::{heldout_metric, iou, train_reference, TrainConfig, TrainReport};
pub use weights::{decode_weights, encode_weights, read_weights, write_weights};

use crate::error::{Error, Result};
use crate::numerics::{Image, Rng};
use crate::scene::{Rect, CHANNELS, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SutKind {
    Steering,
    Segmentation,
}

/// The three reference SUTs: steering, drivable area and lane lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SutId {
    Steer,
    Da,
    Ll,
}

impl SutId {
    pub const ALL: [SutId; 3] = [SutId::Steer, SutId::Da, SutId::Ll];

    pub fn as_str(&self) -> &'static str {
        match self {
            SutId::Steer => "steer",
            SutId::Da => "da",
            SutId::Ll => "ll",
        }
    }

    pub fn kind(&self) -> SutKind {
        match self {
            SutId::Steer => SutKind::Steering,
            SutId::Da | SutId::Ll => SutKind::Segmentation,
        }
    }
}

impl fmt::Display for SutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SutId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steer" => Ok(SutId::Steer),
            "da" => Ok(SutId::Da),
            "ll" => Ok(SutId::Ll),
            other => Err(Error::config(format!("unknown SUT '{other}' (expected steer, da or ll)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SutOutput {
    pub kind: SutKind,
    /// One angle in radians, or `IMAGE_SIZE²` row-major logits.
    pub values: Vec<f64>,
}

impl SutOutput {
    pub fn angle(&self) -> f64 {
        self.values[0]
    }
}

/// Tapped activations keyed by layer index.
pub type LayerActivations = BTreeMap<usize, Tensor>;

pub fn steering_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_channels: 16, out_channels: 32, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense { inputs: 32, outputs: 16 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 16, outputs: 1 },
    ]
}

pub fn segmentation_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_channels: 16, out_channels: 16, kernel: 3, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_channels: 16, out_channels: 1, kernel: 1, stride: 1 },
        LayerSpec::Upsample { factor: 4 },
    ]
}

/// Index of the activation after the last convolution's ReLU.
fn default_taps(specs: &[LayerSpec]) -> Vec<usize> {
    let last_conv = specs
        .iter()
        .enumerate()
        .filter(|(i, s)| matches!(s, LayerSpec::Conv { .. }) && matches!(specs.get(i + 1), Some(LayerSpec::Relu)))
        .map(|(i, _)| i + 1)
        .next_back();
    last_conv.into_iter().collect()
}

pub const INPUT_SHAPE: (usize, usize, usize) = (CHANNELS, IMAGE_SIZE, IMAGE_SIZE);

/// Differentiable scalar objective over an output: value and gradient.
pub type Objective<'a> = dyn Fn(&SutOutput) -> (f64, Vec<f64>) + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSut {
    name: String,
    kind: SutKind,
    net: Network,
    taps: Vec<usize>,
}

impl ReferenceSut {
    pub fn new(name: impl Into<String>, kind: SutKind, net: Network, taps: Vec<usize>) -> Result<Self> {
        let out = net.output_shape();
        match kind {
            SutKind::Steering if out != (1, 1, 1) => {
                return Err(Error::dimension(format!("steering SUT must output one value, got {out:?}")))
            }
            SutKind::Segmentation if (out.1, out.2) != (net.input_shape().1, net.input_shape().2) || out.0 != 1 => {
                return Err(Error::dimension(format!("segmentation SUT must output one logit per pixel, got {out:?}")))
            }
            _ => {}
        }
        if let Some(t) = taps.iter().find(|&&t| t >= net.layers().len()) {
            return Err(Error::dimension(format!("tap {t} beyond {} layers", net.layers().len())));
        }
        Ok(ReferenceSut { name: name.into(), kind, net, taps })
    }

    /// Fresh He-initialised network for one of the reference architectures.
    pub fn initialise(id: SutId, rng: &mut Rng) -> Result<Self> {
        let specs = match id.kind() {
            SutKind::Steering => steering_architecture(),
            SutKind::Segmentation => segmentation_architecture(),
        };
        let net = Network::init(INPUT_SHAPE, &specs, rng)?;
        ReferenceSut::new(id.as_str(), id.kind(), net, default_taps(&specs))
    }

    /// Frozen checked-in weights for a reference SUT.
    pub fn builtin(id: SutId) -> Result<Self> {
        let bytes: &[u8] = match id {
            SutId::Steer => include_bytes!("../../assets/steer.mfwt"),
            SutId::Da => include_bytes!("../../assets/da.mfwt"),
            SutId::Ll => include_bytes!("../../assets/ll.mfwt"),
        };
        decode_weights(bytes)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> SutKind {
        self.kind
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.net.specs()
    }

    /// Rounds every parameter to float32, the stored precision.
    pub fn freeze(&mut self) {
        for p in self.net.params_mut() {
            for v in p.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub(crate) fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Hash of the architecture and every weight bit.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for l in self.net.layers() {
            h.update(l.spec.code().to_le_bytes());
            for d in l.spec.header() {
                h.update(d.to_le_bytes());
            }
            for p in &l.params {
                h.update(p.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Cache identity: name plus weight checksum.
    pub fn cache_id(&self) -> String {
        format!("{}:{:016x}", self.name, self.checksum())
    }

    fn input_tensor(&self, x: &Image) -> Result<Tensor> {
        let (c, h, w) = self.net.input_shape();
        if x.shape() != (h, w, c) {
            return Err(Error::dimension(format!("SUT expects {h}x{w}x{c} input, got {:?}", x.shape())));
        }
        Ok(Tensor::from_hwc(h, w, c, &x.to_f64()))
    }

    /// Interleaved `(h, w, c)` input of arbitrary real values.
    pub fn input_from_hwc(&self, hwc: &[f64]) -> Result<Tensor> {
        let (c, h, w) = self.net.input_shape();
        if hwc.len() != c * h * w {
            return Err(Error::dimension(format!("SUT expects {} input values, got {}", c * h * w, hwc.len())));
        }
        Ok(Tensor::from_hwc(h, w, c, hwc))
    }

    fn output_of(&self, acts: &[Tensor]) -> SutOutput {
        SutOutput { kind: self.kind, values: acts.last().expect("non-empty trace").data.clone() }
    }

    pub fn forward(&self, x: &Image) -> Result<SutOutput> {
        self.forward_tensor(self.input_tensor(x)?)
    }

    pub fn forward_tensor(&self, x: Tensor) -> Result<SutOutput> {
        let acts = self.net.forward_trace(x)?;
        Ok(self.output_of(&acts))
    }

    pub fn forward_with_taps(&self, x: &Image) -> Result<(SutOutput, LayerActivations)> {
        let acts = self.net.forward_trace(self.input_tensor(x)?)?;
        let taps = self.taps.iter().map(|&t| (t, acts[t + 1].clone())).collect();
        Ok((self.output_of(&acts), taps))
    }

    /// Every intermediate activation, input first.
    pub fn trace(&self, x: &Image) -> Result<Vec<Tensor>> {
        self.net.forward_trace(self.input_tensor(x)?)
    }

    /// Output, objective value and the objective's gradient with respect to
    /// the input, in interleaved `(h, w, c)` order.
    pub fn value_and_gradient(&self, x: Tensor, objective: &Objective<'_>) -> Result<(SutOutput, f64, Vec<f64>)> {
        let acts = self.net.forward_trace(x)?;
        let out = self.output_of(&acts);
        let (value, dout) = objective(&out);
        if !value.is_finite() || dout.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(self.net.layers().len(), "non-finite objective"));
        }
        let (c, h, w) = self.net.output_shape();
        if dout.len() != c * h * w {
            return Err(Error::dimension(format!(
                "objective gradient has {} entries, expected {}",
                dout.len(),
                c * h * w
            )));
        }
        let dx = self.net.backward(&acts, Tensor { c, h, w, data: dout }, None)?;
        Ok((out, value, dx.to_hwc()))
    }

    pub fn input_gradient(&self, x: &Image, objective: &Objective<'_>) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(self.input_tensor(x)?, objective)?.2)
    }

    /// Same architecture with freshly sampled weights; `self` is untouched.
    pub fn randomize_weights(&self, rng: &Rng) -> ReferenceSut {
        let mut r = rng.substream("randomize-weights", 0);
        let layers = self.net.layers().iter().map(|l| Layer::init(l.spec, &mut r)).collect();
        let net = Network::new(self.net.input_shape(), layers).expect("same architecture");
        ReferenceSut { name: format!("{}-randomized", self.name), kind: self.kind, net, taps: self.taps.clone() }
    }
}

/// Linear steering SUT: `weight` on every channel of the pixels in `patch`,
/// zero elsewhere, no bias.
pub fn planted_patch_sut(patch: Rect, weight: f64) -> Result<ReferenceSut> {
    let (c, h, w) = INPUT_SHAPE;
    if patch.y1 > h || patch.x1 > w || patch.y0 >= patch.y1 || patch.x0 >= patch.x1 {
        return Err(Error::config("planted patch must be a non-empty rectangle inside the image"));
    }
    let inputs = c * h * w;
    let mut params = vec![0.0; inputs + 1];
    for ch in 0..c {
        for y in patch.y0..patch.y1 {
            for x in patch.x0..patch.x1 {
                params[ch * h * w + y * w + x] = weight;
            }
        }
    }
    let net = Network::new(INPUT_SHAPE, vec![Layer::new(LayerSpec::Dense { inputs, outputs: 1 }, params)?])?;
    ReferenceSut::new("planted-patch", SutKind::Steering, net, vec![])
}

/// Objective returning the steering angle itself.
pub fn angle_objective(out: &SutOutput) -> (f64, Vec<f64>) {
    (out.values[0], vec![1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(rng: &mut Rng) -> Image {
        let data: Vec<f32> = (0..IMAGE_SIZE * IMAGE_SIZE * CHANNELS).map(|_| rng.uniform() as f32).collect();
        Image::new(IMAGE_SIZE, IMAGE_SIZE, CHANNELS, data).unwrap()
    }

    #[test]
    fn taps_are_last_conv_activation() {
        let mut rng = Rng::new(1);
        let s = ReferenceSut::initialise(SutId::Steer, &mut rng).unwrap();
        assert_eq!(s.taps(), &[5]);
        let d = ReferenceSut::initialise(SutId::Da, &mut rng).unwrap();
        assert_eq!(d.taps(), &[5]);
        let x = random_image(&mut rng);
        let (out, acts) = d.forward_with_taps(&x).unwrap();
        assert_eq!(out.values.len(), IMAGE_SIZE * IMAGE_SIZE);
        assert_eq!(acts.keys().copied().collect::<Vec<_>>(), vec![5]);
        assert_eq!(acts[&5].shape(), (16, 32, 32));
    }

    #[test]
    fn zero_input_propagates_first_layer_bias() {
        let mut rng = Rng::new(2);
        let mut s = ReferenceSut::initialise(SutId::Steer, &mut rng).unwrap();
        for p in s.network_mut().params_mut().take(1) {
            let n = p.len();
            for (i, v) in p[n - 8..].iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.3;
            }
        }
        let x = Image::filled(IMAGE_SIZE, IMAGE_SIZE, CHANNELS, 0.0);
        let trace = s.trace(&x).unwrap();
        let bias = s.network().layers()[0].biases().to_vec();
        let conv = &trace[1];
        for c in 0..8 {
            assert!(conv.plane(c).iter().all(|&v| v == bias[c]));
            assert!(trace[2].plane(c).iter().all(|&v| v == bias[c].max(0.0)));
        }
    }

    #[test]
    fn randomized_weights_are_deterministic_and_distinct() {
        let mut rng = Rng::new(3);
        let s = ReferenceSut::initialise(SutId::Steer, &mut rng).unwrap();
        let before = s.checksum();
        let a = s.randomize_weights(&Rng::new(9));
        let b = s.randomize_weights(&Rng::new(9));
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), before);
        assert_eq!(s.checksum(), before);
        assert_eq!(a.architecture(), s.architecture());
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let mut rng = Rng::new(4);
        let s = ReferenceSut::initialise(SutId::Steer, &mut rng).unwrap();
        let x = random_image(&mut rng);
        let g = s.input_gradient(&x, &|_out: &SutOutput| (3.0, vec![0.0])).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = Rng::new(5);
        let s = ReferenceSut::initialise(SutId::Steer, &mut rng).unwrap();
        assert!(matches!(s.forward(&Image::filled(64, 64, 3, 0.5)), Err(Error::Dimension(_))));
    }
}
