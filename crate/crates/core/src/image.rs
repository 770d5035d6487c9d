//! Float images and their PNG / SRFT persistence.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::nets::{load_srft, save_srft, ParamTensor};

/// Row-major (top row first) interleaved float image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width * height * channels != data.len() {
            return shape_err(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let data = (0..width * height).flat_map(|_| value.iter().copied()).collect();
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.pixel(y * self.width + x)
    }

    pub fn set(&mut self, index: usize, value: &[f64]) {
        let c = self.channels;
        self.data[index * c..(index + 1) * c].copy_from_slice(value);
    }

    pub fn same_dims(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    /// Luma with (0.299, 0.587, 0.114) weights; single-channel images pass through.
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(self.channels)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|v| [*v; 3]).collect();
        Image {
            channels: 3,
            data,
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        };
        let mut buf = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut buf,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        crate::io::write_atomic(path, buf.get_ref())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, bytes) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        Image::new(w, h, channels, bytes.into_iter().map(|b| b as f64 / 255.0).collect())
    }

    pub fn to_tensor(&self, name: &str) -> ParamTensor {
        ParamTensor {
            name: name.into(),
            dims: vec![self.height, self.width, self.channels],
            values: self.data.clone(),
        }
    }

    pub fn from_tensor(t: &ParamTensor) -> Result<Image> {
        if t.dims.len() != 3 {
            return shape_err(format!("image tensor must be HxWxC, got {:?}", t.dims));
        }
        Image::new(t.dims[1], t.dims[0], t.dims[2], t.values.clone())
    }

    pub fn save_srft(&self, path: &Path) -> Result<()> {
        save_srft(path, [&self.to_tensor("image")])
    }

    pub fn load_srft(path: &Path) -> Result<Image> {
        let tensors = load_srft(path)?;
        let t = tensors
            .iter()
            .find(|t| t.name == "image")
            .ok_or_else(|| Error::Format("SRFT file has no image tensor".into()))?;
        Image::from_tensor(t)
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let c = self.channels;
        let mut out = vec![0.0; width * height * c];
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let v = |xx: usize, yy: usize| self.data[(yy * self.width + xx) * c + ch];
                    let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
                    let bot = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
                    out[(y * width + x) * c + ch] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        Image {
            width,
            height,
            channels: c,
            data: out,
        }
    }
}
