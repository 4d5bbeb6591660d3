use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dimension(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::dimension(format!("data length {} != {height}x{width}x{channels}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("intensity {v} outside [0,1]")));
        }
        Ok(Image { height, width, channels, data })
    }

    /// Builds an image from f64 values, clamping into `[0, 1]`.
    pub fn from_f64_clamped(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<Self> {
        let data = data.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        Image::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let value = value.clamp(0.0, 1.0);
        Image { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    /// Single-channel plane `c` as a grid.
    pub fn plane(&self, c: usize) -> Grid {
        let mut g = Grid::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                g.set(y, x, f64::from(self.get(y, x, c)));
            }
        }
        g
    }

    /// Channel-mean luminance plane.
    pub fn luma(&self) -> Grid {
        let mut g = Grid::zeros(self.height, self.width);
        let inv = 1.0 / self.channels as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let s: f64 = (0..self.channels).map(|c| f64::from(self.get(y, x, c))).sum();
                g.set(y, x, s * inv);
            }
        }
        g
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(format!("image shapes differ: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// Dense single-channel grid of f64 values (masks, maps, planes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Grid { height, width, data: vec![0.0; height * width] }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dimension(format!("grid data length {} != {height}x{width}", data.len())));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Anything that can be compared sample-by-sample.
pub trait Samples {
    fn sample_shape(&self) -> (usize, usize, usize);
    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_>;
}

impl Samples for Image {
    fn sample_shape(&self) -> (usize, usize, usize) {
        self.shape()
    }

    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.data.iter().map(|&v| f64::from(v)))
    }
}

impl Samples for Grid {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 1)
    }

    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.data.iter().copied())
    }
}

impl Samples for [f64] {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (1, self.len(), 1)
    }

    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.iter().copied())
    }
}

impl Samples for Vec<f64> {
    fn sample_shape(&self) -> (usize, usize, usize) {
        (1, self.len(), 1)
    }

    fn sample_values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        Box::new(self.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn clamping_constructor_keeps_unit_interval() {
        let img = Image::from_f64_clamped(1, 3, 1, &[-0.5, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }
}
