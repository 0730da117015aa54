//! 8-bit grayscale frames and their portable-graymap / PNG encodings.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageBuffer, ImageEncoder, ImageFormat, Luma};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("buffer of {got} bytes does not match {width}x{height}")]
    Size { width: u32, height: u32, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    /// Row-major pixels.
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, FrameError> {
        if pixels.len() != width as usize * height as usize {
            return Err(FrameError::Size {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = v;
    }

    /// Copy of the `w × h` block whose top-left corner is `(x0, y0)`, or
    /// `None` if it does not fit.
    pub fn crop(&self, x0: i64, y0: i64, w: u32, h: u32) -> Option<GrayImage> {
        if x0 < 0
            || y0 < 0
            || x0 + w as i64 > self.width as i64
            || y0 + h as i64 > self.height as i64
        {
            return None;
        }
        let (x0, y0) = (x0 as u32, y0 as u32);
        Some(GrayImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y)))
    }

    fn buffer(&self) -> ImageBuffer<Luma<u8>, &[u8]> {
        ImageBuffer::from_raw(self.width, self.height, self.pixels.as_slice())
            .expect("dimensions checked at construction")
    }

    pub fn encode(&self, format: ImageFormat) -> Result<Vec<u8>, FrameError> {
        let mut out = Cursor::new(Vec::new());
        self.buffer().write_to(&mut out, format)?;
        Ok(out.into_inner())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, FrameError> {
        self.encode(ImageFormat::Png)
    }

    /// Binary portable graymap (P5).
    pub fn to_pgm(&self) -> Result<Vec<u8>, FrameError> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.width, self.height, ExtendedColorType::L8)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let img = image::load_from_memory(bytes)?.into_luma8();
        let (width, height) = img.dimensions();
        GrayImage::from_pixels(width, height, img.into_raw())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), FrameError> {
        std::fs::write(path, self.to_pgm()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FrameError> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// A rendered camera frame with the simulator's ground-truth side channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: GrayImage,
    pub tick: u64,
    /// Seconds since trial start.
    pub timestamp: f64,
    /// Projected visible tip, if it lies in front of the camera.
    pub truth_tip_px: Option<Vector2<f64>>,
}

impl Frame {
    pub fn width(&self) -> u32 {
        self.image.width
    }

    pub fn height(&self) -> u32 {
        self.image.height
    }

    /// True when `px` falls inside the image rectangle.
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width() as f64 && px.y < self.height() as f64
    }
}
