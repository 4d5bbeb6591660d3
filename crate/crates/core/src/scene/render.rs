//! Procedural road-scene renderer.
//!
//! Geometry is a pinhole camera over a flat ground plane with a parabolic
//! road centreline. Style (palette, shading, texture, post-processing) is
//! controlled entirely by [`GeneratorKnobs`]; the real-style render is the
//! generator at its perfect setting, so geometry and ground truth never
//! depend on style.

use serde::{Deserialize, Serialize};

use super::scenario::ScenarioDescription;
use crate::error::{Error, Result};
use crate::numerics::{blur_interleaved, gaussian_radius, mix64, Grid, Image, Rng};

pub const IMAGE_SIZE: usize = 128;
pub const CHANNELS: usize = 3;

const HORIZON: f64 = 48.0;
const FOCAL: f64 = 80.0;
const CAMERA_HEIGHT: f64 = 1.5;
const LANE_WIDTH: f64 = 3.5;
const PAINT_HALF_WIDTH: f64 = 0.1;
const PAINT_MAX_DEPTH: f64 = 45.0;
const OBSTACLE_DEPTH: f64 = 10.0;
const OBSTACLE_HALF_WIDTH: f64 = 0.9;
const OBSTACLE_HEIGHT: f64 = 1.4;
pub const LOOKAHEAD: f64 = 10.0;
const AVOIDANCE_GAIN: f64 = 0.04;

/// Pixel rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn dilate(&self, r: usize, h: usize, w: usize) -> Rect {
        Rect {
            y0: self.y0.saturating_sub(r),
            y1: (self.y1 + r).min(h),
            x0: self.x0.saturating_sub(r),
            x1: (self.x1 + r).min(w),
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Screen box of the roadside decoy sign.
pub const DECOY_RECT: Rect = Rect { y0: 4, y1: 44, x0: 84, x1: 124 };

/// Generator parameters. Continuous knobs are clamped into range on
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorKnobs {
    pub seed: u64,
    pub style_strength: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub blur_radius: f64,
    pub texture_gain: f64,
}

/// `(lo, hi)` for each continuous knob, in [`GeneratorKnobs::continuous`] order.
pub const KNOB_BOUNDS: [(f64, f64); 5] = [(0.0, 1.0), (0.5, 1.5), (-0.3, 0.3), (0.0, 3.0), (0.0, 1.0)];
pub const KNOB_NAMES: [&str; 5] = ["style_strength", "contrast", "brightness", "blur_radius", "texture_gain"];

impl GeneratorKnobs {
    pub fn new(
        seed: u64,
        style_strength: f64,
        contrast: f64,
        brightness: f64,
        blur_radius: f64,
        texture_gain: f64,
    ) -> Self {
        GeneratorKnobs::from_continuous(seed, [style_strength, contrast, brightness, blur_radius, texture_gain])
    }

    /// The setting that reproduces the real-style render for `seed`.
    pub fn perfect(seed: u64) -> Self {
        GeneratorKnobs::new(seed, 1.0, 1.0, 0.0, 0.0, 1.0)
    }

    pub fn continuous(&self) -> [f64; 5] {
        [self.style_strength, self.contrast, self.brightness, self.blur_radius, self.texture_gain]
    }

    pub fn from_continuous(seed: u64, v: [f64; 5]) -> Self {
        let c = |i: usize| {
            let x = if v[i].is_finite() { v[i] } else { KNOB_BOUNDS[i].0 };
            x.clamp(KNOB_BOUNDS[i].0, KNOB_BOUNDS[i].1)
        };
        GeneratorKnobs {
            seed,
            style_strength: c(0),
            contrast: c(1),
            brightness: c(2),
            blur_radius: c(3),
            texture_gain: c(4),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        GeneratorKnobs { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.continuous().iter().enumerate() {
            let (lo, hi) = KNOB_BOUNDS[i];
            if !v.is_finite() || *v < lo || *v > hi {
                return Err(Error::validation(format!("{}={v} outside [{lo}, {hi}]", KNOB_NAMES[i])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Region {
    Sky { t: f64 },
    Grass { z: f64 },
    Asphalt { z: f64 },
    Lane { z: f64 },
    Obstacle,
    Decoy { stripe: f64 },
}

type Rgb = [f64; 3];

struct Palette {
    sky_top: Rgb,
    sky_horizon: Rgb,
    asphalt: Rgb,
    grass: Rgb,
    paint: Rgb,
    obstacle: Rgb,
    decoy: Rgb,
}

const REAL: Palette = Palette {
    sky_top: [0.42, 0.56, 0.80],
    sky_horizon: [0.78, 0.82, 0.86],
    asphalt: [0.36, 0.36, 0.38],
    grass: [0.30, 0.42, 0.18],
    paint: [0.90, 0.90, 0.86],
    obstacle: [0.55, 0.12, 0.10],
    decoy: [0.85, 0.70, 0.12],
};

const SYNTHETIC: Palette = Palette {
    sky_top: [0.25, 0.45, 0.95],
    sky_horizon: [0.55, 0.72, 0.98],
    asphalt: [0.32, 0.40, 0.33],
    grass: [0.18, 0.60, 0.18],
    paint: [1.0, 1.0, 1.0],
    obstacle: [0.78, 0.05, 0.05],
    decoy: [0.95, 0.85, 0.05],
};

fn lerp3(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Depth of the ground plane seen through row centre `yc` (`yc > HORIZON`).
fn ground_depth(yc: f64) -> f64 {
    FOCAL * CAMERA_HEIGHT / (yc - HORIZON)
}

fn road_centre(curvature: f64, z: f64) -> f64 {
    0.5 * curvature * z * z
}

fn obstacle_rect(sd: &ScenarioDescription) -> Option<Rect> {
    if !sd.obstacle_present {
        return None;
    }
    let z = OBSTACLE_DEPTH;
    let xc = road_centre(sd.road_curvature, z) + sd.obstacle_lateral_offset;
    let u = |x: f64| IMAGE_SIZE as f64 / 2.0 + x * FOCAL / z;
    let bottom = HORIZON + FOCAL * CAMERA_HEIGHT / z;
    let top = bottom - OBSTACLE_HEIGHT * FOCAL / z;
    let clampi = |v: f64| v.round().clamp(0.0, IMAGE_SIZE as f64) as usize;
    Some(Rect {
        y0: clampi(top),
        y1: clampi(bottom),
        x0: clampi(u(xc - OBSTACLE_HALF_WIDTH)),
        x1: clampi(u(xc + OBSTACLE_HALF_WIDTH)),
    })
}

fn classify(sd: &ScenarioDescription, obstacle: Option<Rect>, y: usize, x: usize) -> Region {
    if sd.decoy_sign_present && DECOY_RECT.contains(y, x) {
        // the chevron points toward the bend
        let lx = if sd.road_curvature >= 0.0 { x - DECOY_RECT.x0 } else { DECOY_RECT.x1 - 1 - x } as f64;
        let ly = (y as f64 - (DECOY_RECT.y0 + DECOY_RECT.y1) as f64 / 2.0).abs();
        let phase = ((lx + ly) / 3.0).floor() as i64;
        return Region::Decoy { stripe: if phase % 2 == 0 { 1.0 } else { -1.0 } };
    }
    if obstacle.is_some_and(|r| r.contains(y, x)) {
        return Region::Obstacle;
    }
    let yc = y as f64 + 0.5;
    if yc <= HORIZON + 0.5 {
        return Region::Sky { t: (yc / HORIZON).min(1.0) };
    }
    let z = ground_depth(yc);
    let lateral = (x as f64 + 0.5 - IMAGE_SIZE as f64 / 2.0) * z / FOCAL;
    let r = lateral - road_centre(sd.road_curvature, z);
    let half = f64::from(sd.lane_count) * LANE_WIDTH / 2.0;
    if r.abs() > half {
        return Region::Grass { z };
    }
    if z <= PAINT_MAX_DEPTH {
        // paint is widened to roughly a third of a pixel footprint so distant stripes stay connected
        let tol = PAINT_HALF_WIDTH + 0.35 * z / FOCAL;
        for k in 1..sd.lane_count {
            let divider = -half + f64::from(k) * LANE_WIDTH;
            if (r - divider).abs() <= tol {
                return Region::Lane { z };
            }
        }
    }
    Region::Asphalt { z }
}

/// Ground truth derived from geometry only.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub drivable: Grid,
    pub lane: Grid,
    /// Radians; positive steers right.
    pub steering: f64,
}

pub fn steering_label(sd: &ScenarioDescription) -> f64 {
    let follow = (LOOKAHEAD * sd.road_curvature).atan();
    let avoid = if sd.obstacle_present { -AVOIDANCE_GAIN * sd.obstacle_lateral_offset.tanh() } else { 0.0 };
    follow + avoid
}

pub fn render_masks(sd: &ScenarioDescription) -> Result<GroundTruth> {
    sd.validate()?;
    let obstacle = obstacle_rect(sd);
    let mut drivable = Grid::zeros(IMAGE_SIZE, IMAGE_SIZE);
    let mut lane = Grid::zeros(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            match classify(sd, obstacle, y, x) {
                Region::Asphalt { .. } => drivable.set(y, x, 1.0),
                Region::Lane { .. } => {
                    drivable.set(y, x, 1.0);
                    lane.set(y, x, 1.0);
                }
                _ => {}
            }
        }
    }
    Ok(GroundTruth { drivable, lane, steering: steering_label(sd) })
}

/// Hash noise in `[-1, 1]` for integer lattice point `(a, b)` of stream `key`.
#[inline]
fn lattice(key: u64, a: u64, b: u64) -> f64 {
    let h = mix64(key ^ mix64((a << 32) ^ b));
    (h >> 11) as f64 * (2.0 / (1u64 << 53) as f64) - 1.0
}

/// Per-seed scene variation shared by every style: exposure offset, texture
/// amplitude factor and contrast factor.
struct SeedJitter {
    exposure: f64,
    texture: f64,
    contrast: f64,
}

fn seed_jitter(seed: u64) -> SeedJitter {
    let mut r = Rng::stream("render-jitter", seed, 0);
    SeedJitter {
        exposure: r.uniform_in(-0.02, 0.02),
        texture: r.uniform_in(0.9, 1.1),
        contrast: r.uniform_in(0.97, 1.03),
    }
}

fn region_texture_amplitude(region: Region) -> f64 {
    match region {
        Region::Sky { .. } => 0.012,
        Region::Grass { .. } => 0.10,
        Region::Asphalt { .. } => 0.08,
        Region::Lane { .. } => 0.04,
        Region::Obstacle => 0.05,
        Region::Decoy { .. } => 0.03,
    }
}

const DECOY_STRIPE_AMPLITUDE: f64 = 0.36;
const SENSOR_NOISE: f64 = 0.012;

/// Renders `sd` with the given generator knobs.
pub fn render(sd: &ScenarioDescription, knobs: &GeneratorKnobs) -> Result<Image> {
    sd.validate()?;
    knobs.validate()?;
    let s = knobs.style_strength;
    let tg = knobs.texture_gain;
    let jitter = seed_jitter(knobs.seed);
    let light = 0.6 + 0.4 * sd.sun_elevation.to_radians().sin();
    let obstacle = obstacle_rect(sd);
    let fine_key = mix64(knobs.seed ^ 0x7465_7874_7572_6531);
    let coarse_key = mix64(knobs.seed ^ 0x7465_7874_7572_6532);
    let synth_key = mix64(knobs.seed ^ 0x7465_7874_7572_6533);
    let sensor_key = mix64(knobs.seed ^ 0x7365_6e73_6f72_0001);

    let sky_top = lerp3(SYNTHETIC.sky_top, REAL.sky_top, s);
    let sky_hor = lerp3(SYNTHETIC.sky_horizon, REAL.sky_horizon, s);
    let asphalt = lerp3(SYNTHETIC.asphalt, REAL.asphalt, s);
    let grass = lerp3(SYNTHETIC.grass, REAL.grass, s);
    let paint = lerp3(SYNTHETIC.paint, REAL.paint, s);
    let obst = lerp3(SYNTHETIC.obstacle, REAL.obstacle, s);
    let decoy = lerp3(SYNTHETIC.decoy, REAL.decoy, s);

    let n = IMAGE_SIZE;
    let mut data = vec![0.0f64; n * n * CHANNELS];
    for y in 0..n {
        for x in 0..n {
            let region = classify(sd, obstacle, y, x);
            let base = match region {
                Region::Sky { t } => lerp3(sky_top, sky_hor, t),
                Region::Grass { .. } => grass,
                Region::Asphalt { .. } => asphalt,
                Region::Lane { .. } => paint,
                Region::Obstacle => obst,
                Region::Decoy { .. } => decoy,
            };
            // distance haze belongs to the real-style shading model
            let base = match region {
                Region::Grass { z } | Region::Asphalt { z } | Region::Lane { z } => {
                    lerp3(base, sky_hor, s * 0.3 * (1.0 - (-z / 35.0).exp()))
                }
                _ => base,
            };
            let (yy, xx) = (y as u64, x as u64);
            let real_tex = 0.65 * lattice(fine_key, yy, xx) + 0.35 * lattice(coarse_key, yy / 2, xx / 2);
            let synth_tex = 0.5 * lattice(synth_key, yy / 4, xx / 4);
            let mut tex = region_texture_amplitude(region) * (s * real_tex + (1.0 - s) * synth_tex);
            if let Region::Decoy { stripe } = region {
                // stripe contrast is fine detail of the real-style model
                tex -= s.powi(3) * DECOY_STRIPE_AMPLITUDE * 0.5 * (1.0 - stripe);
            }
            let tex = tg * jitter.texture * tex;
            for (c, &b) in base.iter().enumerate() {
                let sensor = SENSOR_NOISE * tg * lattice(sensor_key, (yy << 8) | xx, c as u64);
                let v = b * light + tex + sensor + jitter.exposure;
                let v = (v - 0.5) * jitter.contrast * knobs.contrast + 0.5 + knobs.brightness;
                data[(y * n + x) * CHANNELS + c] = v;
            }
        }
    }
    let data = blur_interleaved(&data, n, n, CHANNELS, knobs.blur_radius);
    Image::from_f64_clamped(n, n, CHANNELS, &data)
}

/// Real-style render; the texture realisation is keyed by `rng`'s seed.
pub fn render_real(sd: &ScenarioDescription, rng: &Rng) -> Result<Image> {
    render(sd, &GeneratorKnobs::perfect(rng.seed()))
}

pub fn render_synthetic(sd: &ScenarioDescription, knobs: &GeneratorKnobs) -> Result<Image> {
    render(sd, knobs)
}

/// Pixels that may change when the decoy sign is toggled under `knobs`.
pub fn decoy_region(knobs: &GeneratorKnobs) -> Rect {
    DECOY_RECT.dilate(gaussian_radius(knobs.blur_radius), IMAGE_SIZE, IMAGE_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs(row: &[f64]) -> usize {
        let mut count = 0;
        let mut prev = 0.0;
        for &v in row {
            if v > 0.5 && prev <= 0.5 {
                count += 1;
            }
            prev = v;
        }
        count
    }

    #[test]
    fn real_render_is_deterministic() {
        let sd = ScenarioDescription::straight();
        let a = render_real(&sd, &Rng::new(5)).unwrap();
        let b = render_real(&sd, &Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, render_real(&sd, &Rng::new(6)).unwrap());
    }

    #[test]
    fn three_lanes_have_two_divider_stripes() {
        let sd = ScenarioDescription { lane_count: 3, ..ScenarioDescription::straight() };
        let gt = render_masks(&sd).unwrap();
        for y in [60, 70, 80, 90] {
            let row: Vec<f64> = (0..IMAGE_SIZE).map(|x| gt.lane.get(y, x)).collect();
            assert_eq!(runs(&row), 2, "row {y}");
        }
        let sd4 = ScenarioDescription { lane_count: 4, ..sd };
        let row: Vec<f64> = (0..IMAGE_SIZE).map(|x| render_masks(&sd4).unwrap().lane.get(60, x)).collect();
        assert_eq!(runs(&row), 3);
    }

    #[test]
    fn obstacle_absent_leaves_no_obstacle_pixels() {
        let sd = ScenarioDescription { obstacle_present: false, ..ScenarioDescription::straight() };
        assert!(obstacle_rect(&sd).is_none());
        let with = ScenarioDescription { obstacle_present: true, ..sd.clone() };
        let rect = obstacle_rect(&with).unwrap();
        assert!(rect.area() > 50);
        let gt = render_masks(&with).unwrap();
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                assert_eq!(gt.drivable.get(y, x), 0.0);
            }
        }
    }

    #[test]
    fn steering_label_examples() {
        let sd = ScenarioDescription::straight();
        assert_eq!(render_masks(&sd).unwrap().steering, 0.0);
        let sd =
            ScenarioDescription { road_curvature: 0.013, obstacle_present: true, obstacle_lateral_offset: 1.2, ..sd };
        let a = steering_label(&sd);
        assert_eq!(steering_label(&sd.mirrored()), -a);
        assert!((a - ((0.13f64).atan() - 0.04 * 1.2f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn masks_ignore_style() {
        let sd =
            ScenarioDescription { decoy_sign_present: true, obstacle_present: true, ..ScenarioDescription::straight() };
        let gt = render_masks(&sd).unwrap();
        assert_eq!(gt, render_masks(&sd).unwrap());
    }

    #[test]
    fn perfect_knobs_reproduce_real_render() {
        let sd = ScenarioDescription { road_curvature: -0.011, ..ScenarioDescription::straight() };
        let real = render_real(&sd, &Rng::new(77)).unwrap();
        let synth = render_synthetic(&sd, &GeneratorKnobs::perfect(77)).unwrap();
        assert_eq!(real, synth);
    }

    #[test]
    fn knobs_are_clamped() {
        let k = GeneratorKnobs::new(1, 2.0, 0.1, 0.9, -1.0, f64::NAN);
        assert_eq!(k.continuous(), [1.0, 0.5, 0.3, 0.0, 0.0]);
        k.validate().unwrap();
    }

    #[test]
    fn flat_rendering_has_uniform_asphalt() {
        let sd = ScenarioDescription { sun_elevation: 30.0, ..ScenarioDescription::straight() };
        let knobs = GeneratorKnobs::new(3, 0.0, 1.0, 0.0, 0.0, 0.0);
        let img = render_synthetic(&sd, &knobs).unwrap();
        let gt = render_masks(&sd).unwrap();
        let mut vals = Vec::new();
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if gt.drivable.get(y, x) > 0.5 && gt.lane.get(y, x) < 0.5 {
                    for c in 0..CHANNELS {
                        vals.push(f64::from(img.get(y, x, c)));
                    }
                }
            }
        }
        // per-channel variance
        for c in 0..CHANNELS {
            let ch: Vec<f64> = vals.iter().skip(c).step_by(CHANNELS).copied().collect();
            let m = ch.iter().sum::<f64>() / ch.len() as f64;
            let var = ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!(var < 1e-4, "channel {c} variance {var}");
        }
    }

    #[test]
    fn brightness_shifts_mean_intensity() {
        let sd = ScenarioDescription { sun_elevation: 8.0, ..ScenarioDescription::straight() };
        let base = GeneratorKnobs::new(9, 0.3, 1.0, 0.0, 0.0, 0.5);
        let bright = GeneratorKnobs { brightness: 0.3, ..base };
        let d = render_synthetic(&sd, &bright).unwrap().mean() - render_synthetic(&sd, &base).unwrap().mean();
        assert!((d - 0.3).abs() <= 0.02, "mean shift {d}");
    }

    #[test]
    fn decoy_changes_only_its_region() {
        for blur in [0.0, 1.7] {
            let knobs = GeneratorKnobs::new(4, 0.4, 1.1, 0.05, blur, 0.6);
            let off = ScenarioDescription { decoy_sign_present: false, ..ScenarioDescription::straight() };
            let on = ScenarioDescription { decoy_sign_present: true, ..off.clone() };
            let a = render_synthetic(&off, &knobs).unwrap();
            let b = render_synthetic(&on, &knobs).unwrap();
            let region = decoy_region(&knobs);
            let mut changed_inside = false;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    for c in 0..CHANNELS {
                        let same = a.get(y, x, c) == b.get(y, x, c);
                        if region.contains(y, x) {
                            changed_inside |= !same;
                        } else {
                            assert!(same, "pixel ({y},{x}) changed outside decoy region");
                        }
                    }
                }
            }
            assert!(changed_inside);
        }
    }
}
