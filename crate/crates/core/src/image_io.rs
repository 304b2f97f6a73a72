//! RGB images as channel-major `[0, 1]` planes, with 8-bit PNG and binary
//! PPM (P6) encoding.

use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};

use crate::error::{dim_err, LaffError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// R plane, then G, then B; each row-major.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(dim_err!("image must be non-empty, got {width}x{height}"));
        }
        if data.len() != 3 * width * height {
            return Err(dim_err!(
                "{width}x{height} RGB image needs {} values, got {}",
                3 * width * height,
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self { width, height, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirror across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.data[(c * self.height + y) * self.width + x] = self.at(c, y, self.width - 1 - x);
                }
            }
        }
        out
    }

    /// Rotation by 90 degrees clockwise.
    pub fn rotate90(&self) -> Self {
        let (w, h) = (self.height, self.width);
        let mut data = vec![0.0; 3 * w * h];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = self.at(c, self.height - 1 - x, y);
                }
            }
        }
        Self { width: w, height: h, data }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("image dims are consistent")
    }

    /// Reads entry `index` of a `[B, 3, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let [b, c, h, w] = t.dims4();
        if c != 3 || index >= b {
            return Err(dim_err!("cannot take RGB image {index} from tensor {:?}", t.shape()));
        }
        let n = 3 * h * w;
        let data = t.data()[index * n..(index + 1) * n]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Self::new(w, h, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let plane = self.width * self.height;
        let mut buf = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                buf.push(quantize(self.data[c * plane + i]));
            }
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized to image")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self { width: w, height: h, data }
    }

    /// Values after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_resized(path, None)
    }

    /// Decodes PNG or PPM; optionally resizes to `(width, height)` with a
    /// triangle filter.
    pub fn load_resized(path: &Path, size: Option<(usize, usize)>) -> Result<Self> {
        let img = image::open(path).map_err(|e| LaffError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut rgb = img.to_rgb8();
        if let Some((w, h)) = size {
            if (rgb.width() as usize, rgb.height() as usize) != (w, h) {
                rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
            }
        }
        Ok(Self::from_rgb8(&rgb))
    }

    /// Encodes by extension: `.ppm` as binary P6, anything else as PNG.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let format = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "ppm" => ImageFormat::Pnm,
            _ => ImageFormat::Png,
        };
        let rgb = self.to_rgb8();
        if format == ImageFormat::Pnm {
            // binary P6 with maxval 255
            let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend_from_slice(rgb.as_raw());
            std::fs::write(path, bytes)?;
            return Ok(());
        }
        rgb.save_with_format(path, format).map_err(|e| LaffError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// True for file names this crate can decode.
pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm")
    )
}
