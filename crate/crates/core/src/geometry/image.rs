use nalgebra::Vector2;

use crate::error::{Error, Result};

/// Row-major interleaved image: texel `(x, y)` channel `c` is at
/// `(y * width + x) * channels + c`. Colour images hold values in `[0, 1]`;
/// feature and depth maps are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u32,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::Config(format!(
                "image data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: f64) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        Self {
            width,
            height,
            channels,
            data: vec![value; width as usize * height as usize * channels as usize],
        }
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        channels: u32,
        mut f: impl FnMut(u32, u32, u32) -> f64,
    ) -> Self {
        let mut img = Self::filled(width, height, channels, 0.0);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let i = img.index(x, y, c);
                    img.data[i] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32, c: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u32) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u32, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn texel(&self, x: u32, y: u32) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels as usize]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Pixel-wise `a * self + b * other`.
    pub fn linear_combination(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::Config("image shapes differ".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.width, self.height, self.channels, data)
    }

    /// Standard four-texel bilinear interpolation. Texel centres sit at
    /// integer pixel coordinates, so the domain is `[0, w-1] x [0, h-1]`.
    pub fn bilinear_sample(&self, pixel: &Vector2<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels as usize];
        self.bilinear_sample_into(pixel, &mut out)?;
        Ok(out)
    }

    pub fn bilinear_sample_into(&self, pixel: &Vector2<f64>, out: &mut [f64]) -> Result<()> {
        let (u, v) = (pixel.x, pixel.y);
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(u >= 0.0 && v >= 0.0 && u <= max_x && v <= max_y) {
            return Err(Error::OutOfRange(format!(
                "pixel ({u}, {v}) outside [0, {max_x}] x [0, {max_y}]"
            )));
        }
        let x0 = (u.floor() as u32).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as u32).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let (t00, t10, t01, t11) = (
            self.texel(x0, y0),
            self.texel(x1, y0),
            self.texel(x0, y1),
            self.texel(x1, y1),
        );
        for c in 0..self.channels as usize {
            out[c] = w00 * t00[c] + w10 * t10[c] + w01 * t01[c] + w11 * t11[c];
        }
        Ok(())
    }

    /// Nearest texel to `pixel`, or `None` outside the image.
    pub fn nearest_texel(&self, pixel: &Vector2<f64>) -> Option<(u32, u32)> {
        let x = pixel.x.round();
        let y = pixel.y.round();
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as u32, y as u32))
        } else {
            None
        }
    }

    /// Extracts a single channel as its own image.
    pub fn channel(&self, c: u32) -> Self {
        Self::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Rec.601 luminance for 3+ channel images; identity for one channel.
    pub fn luminance(&self) -> Self {
        if self.channels < 3 {
            return self.channel(0);
        }
        Self::from_fn(self.width, self.height, 1, |x, y, _| {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        })
    }

    /// Bilinear resampling where output texel `x` reads input pixel
    /// `x * (w_in / w_out)`, the same mapping used to address feature maps
    /// from image-space projections.
    pub fn resample(&self, width: u32, height: u32) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::filled(width, height, self.channels, 0.0);
        let c = self.channels as usize;
        for y in 0..height {
            for x in 0..width {
                let p = Vector2::new(
                    (x as f64 * sx).min((self.width - 1) as f64),
                    (y as f64 * sy).min((self.height - 1) as f64),
                );
                let i = out.index(x, y, 0);
                self.bilinear_sample_into(&p, &mut out.data[i..i + c])
                    .expect("clamped into range");
            }
        }
        out
    }
}
