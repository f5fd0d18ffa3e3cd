use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A height × width × channels grid of activations, stored row-major in
/// (y, x, channel) order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMap")]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMap> for FeatureMap {
    type Error = crate::Error;

    fn try_from(raw: RawMap) -> Result<Self> {
        FeatureMap::new(raw.height, raw.width, raw.channels, raw.data)
    }
}

impl FeatureMap {
    /// Validating constructor: dimensions must be positive, the buffer must
    /// have exactly `height * width * channels` entries and all of them must
    /// be finite.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(invalid!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite(format!(
                "feature map value at flat index {pos} is {}",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(
            height > 0 && width > 0 && channels > 0,
            "feature map dimensions must be positive"
        );
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut map = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    map.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        map
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.height && x < self.width && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// All channels at one spatial position.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn channel(&self, c: usize) -> FeatureMap {
        FeatureMap::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    /// `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &FeatureMap, scale: f64) {
        assert!(self.same_shape(other), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate maps of identical spatial size along the channel axis.
    pub fn concat_channels(maps: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = maps
            .first()
            .ok_or_else(|| invalid!("cannot concatenate an empty list of maps"))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = maps.iter().find(|m| m.height != h || m.width != w) {
            return Err(invalid!(
                "cannot concatenate {}x{} with {}x{}",
                h,
                w,
                bad.height,
                bad.width
            ));
        }
        let channels: usize = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for m in maps {
                data.extend_from_slice(&m.data[p * m.channels..(p + 1) * m.channels]);
            }
        }
        Ok(FeatureMap {
            height: h,
            width: w,
            channels,
            data,
        })
    }
}
