use crate::error::{LabError, Result};

/// Channel-planar image with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

/// Resampling kernel used by crops and resizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Resample {
    #[default]
    Bilinear,
    /// Exact-value mode for tests: every output pixel is a copy of an input pixel.
    Nearest,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(LabError::Config("image extents must be positive".into()));
        }
        if pixels.len() != channels * height * width {
            return Err(LabError::shape(
                "Image::new",
                &[channels, height, width],
                &[pixels.len()],
            ));
        }
        let mut img = Image {
            channels,
            height,
            width,
            pixels,
        };
        img.clamp();
        Ok(img)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            pixels: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height, self.width);
        self.pixels[(c * h + y) * w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.pixels[c * n..(c + 1) * n]
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }

    /// Resamples the whole image to `(height, width)`.
    pub fn resize(&self, height: usize, width: usize, mode: Resample) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        super::transforms::crop_resample(
            self,
            (0.0, 0.0, self.width as f64, self.height as f64),
            (height, width),
            mode,
        )
    }
}
