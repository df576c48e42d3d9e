//! Dense floating-point image planes.

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image of linear intensities.
///
/// Sample `(r, c, ch)` lives at `(r * width + c) * channels + ch`. Values are
/// nominally in `[0, 1]` for radiometric images, but the same container also
/// carries differences, band components and gradients, so only finiteness is
/// enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("image must have at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} samples, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite sample at index {i}")));
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
        assert!(channels > 0, "image must have at least one channel");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image by evaluating `f(r, c, ch)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Interleaves planar channel buffers of `height * width` samples each.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        if channels == 0 {
            return Err(Error::Shape("no planes given".into()));
        }
        if let Some(p) = planes.iter().find(|p| p.len() != height * width) {
            return Err(Error::Shape(format!(
                "plane of {} samples does not match {}x{}",
                p.len(),
                height,
                width
            )));
        }
        let mut data = vec![0.0; height * width * channels];
        for (ch, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + ch] = v;
            }
        }
        Self::new(height, width, channels, data)
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

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
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
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + ch] = v;
    }

    /// Copies one channel out as a planar `height * width` buffer.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        assert!(ch < self.channels);
        self.data
            .iter()
            .skip(ch)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|ch| self.plane(ch)).collect()
    }

    pub fn set_plane(&mut self, ch: usize, plane: &[f64]) {
        assert!(ch < self.channels);
        assert_eq!(plane.len(), self.pixels());
        for (i, &v) in plane.iter().enumerate() {
            self.data[i * self.channels + ch] = v;
        }
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `f(self, other)`; panics on shape mismatch.
    pub fn zip_map(&self, other: &ImagePlane, f: impl Fn(f64, f64) -> f64) -> ImagePlane {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sub(&self, other: &ImagePlane) -> Result<ImagePlane> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add(&self, other: &ImagePlane) -> Result<ImagePlane> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn scale(&self, s: f64) -> ImagePlane {
        self.map(|v| v * s)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ImagePlane) {
        assert!(self.same_shape(x), "axpy on mismatched shapes");
        for (y, &xv) in self.data.iter_mut().zip(&x.data) {
            *y += a * xv;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Linear luma `0.2126 R + 0.7152 G + 0.0722 B`; single-channel images are
    /// returned unchanged, other channel counts average their channels.
    pub fn luma(&self) -> ImagePlane {
        match self.channels {
            1 => self.clone(),
            3 => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
                    .collect();
                ImagePlane {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data,
                }
            }
            n => {
                let data = self
                    .data
                    .chunks_exact(n)
                    .map(|p| p.iter().sum::<f64>() / n as f64)
                    .collect();
                ImagePlane {
                    height: self.height,
                    width: self.width,
                    channels: 1,
                    data,
                }
            }
        }
    }

    /// Crops the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImagePlane> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let ch = self.channels;
        let mut data = Vec::with_capacity(height * width * ch);
        for r in top..top + height {
            let start = (r * self.width + left) * ch;
            data.extend_from_slice(&self.data[start..start + width * ch]);
        }
        Ok(ImagePlane {
            height,
            width,
            channels: ch,
            data,
        })
    }
}
