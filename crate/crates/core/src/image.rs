use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scene::Rgb;

/// Row-major RGB image with float channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, c: Rgb) -> Self {
        Self { width, height, data: vec![c; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.data[y * self.width + x] = c;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Single channel as a dense row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().map(|p| p[c]).collect()
    }

    pub fn map(&self, mut f: impl FnMut(Rgb) -> Rgb) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&p| f(p)).collect() }
    }
}
