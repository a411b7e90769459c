use serde::{Deserialize, Serialize};

use crate::error::{HfnError, Result};

/// Binary `height x width` mask in row-major order (1 = lesion).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(HfnError::ShapeMismatch(format!(
                "mask has {} values for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(HfnError::ShapeMismatch("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, values: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Mask { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.values[row * self.width + col] = on as u8;
    }

    pub fn count_foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn count_background(&self) -> usize {
        self.values.len() - self.count_foreground()
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, values: self.values.iter().map(|v| 1 - v).collect() }
    }

    /// Grayscale image with 0 / 255 pixels.
    pub fn to_gray_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Binarize a grayscale image at 128.
    pub fn from_gray_image(img: &image::GrayImage) -> Mask {
        let (w, h) = img.dimensions();
        Mask {
            height: h as usize,
            width: w as usize,
            values: img.as_raw().iter().map(|&v| (v >= 128) as u8).collect(),
        }
    }

    /// PNG encoding of [`Mask::to_gray_image`].
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_gray_image()
            .write_to(&mut buf, image::ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        buf.into_inner()
    }
}
