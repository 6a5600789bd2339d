//! Plain 8-bit rasters and binary masks shared by the 2D stages, plus PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};

/// Interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[u8]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Raster {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::contract(
                "raster",
                format!(
                    "buffer of {} bytes does not match {width}x{height}x{channels}",
                    data.len()
                ),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn to_rgb_image(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::contract("raster", "RGB export needs 3 channels"));
        }
        Ok(RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked by construction"))
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        Raster {
            width: img.width() as usize,
            height: img.height() as usize,
            channels: 3,
            data: img.as_raw().clone(),
        }
    }
}

/// Binary occupancy mask; `true` marks an occupied (ground-truth) pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn matches(&self, r: &Raster) -> bool {
        self.width == r.width && self.height == r.height
    }
}

pub fn read_rgb_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_rgb8();
    Ok(Raster::from_rgb_image(&img))
}

pub fn write_rgb_png(path: &Path, r: &Raster) -> Result<()> {
    r.to_rgb_image()?.save(path)?;
    Ok(())
}

/// Reads any grayscale-convertible PNG; values ≥ 128 count as occupied.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&v| v >= 128).collect(),
    })
}

pub fn write_mask_png(path: &Path, m: &Mask) -> Result<()> {
    let data = m.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(m.width as u32, m.height as u32, data)
        .expect("mask buffer length checked by construction");
    img.save(path)?;
    Ok(())
}

pub fn write_gray16_png(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
            .ok_or_else(|| Error::contract("raster", "16-bit buffer does not match dimensions"))?;
    img.save(path)?;
    Ok(())
}

pub fn read_gray16_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)?.to_luma16();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}
