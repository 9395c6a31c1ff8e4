//! Planar float rasters, validity masks and 8-bit PNG I/O.

use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::{Error, Real, Result};

/// `channels × height × width` intensities in `[0, 1]`, stored planar and
/// row-major (`data[c·H·W + y·W + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!("empty image {width}×{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ShapeMismatch(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {width}·{height}·{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::OutOfRange(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    /// Builds an image from `f(channel, x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, x, y);
                    img.data[(c * height + y) * width + x] = v.max(T::zero()).min(T::one());
                }
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Sets every pixel invalid in `mask` to zero in all channels.
    pub fn zero_outside(&mut self, mask: &ValidityMask) -> Result<()> {
        if mask.width() != self.width || mask.height() != self.height {
            return Err(Error::ShapeMismatch("mask does not match the image".into()));
        }
        let n = self.width * self.height;
        for c in 0..self.channels {
            for (v, ok) in self.data[c * n..(c + 1) * n].iter_mut().zip(mask.bits()) {
                if !ok {
                    *v = T::zero();
                }
            }
        }
        Ok(())
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Luma (BT.601 weights) for RGB input; a copy for grayscale.
    pub fn to_grayscale(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        let data = r
            .iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| (wr * *r + wg * *g + wb * *b).min(T::one()))
            .collect();
        Self { width: self.width, height: self.height, channels: 1, data }
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Bilinear resize with pixel-center alignment; borders are clamped.
    pub fn resize(&self, new_w: usize, new_h: usize) -> Self {
        if new_w == self.width && new_h == self.height {
            return self.clone();
        }
        let sx = T::lit(self.width as f64 / new_w as f64);
        let sy = T::lit(self.height as f64 / new_h as f64);
        let half = T::lit(0.5);
        let max_x = T::lit((self.width - 1) as f64);
        let max_y = T::lit((self.height - 1) as f64);
        let mut out = Self::zeros(new_w, new_h, self.channels);
        for y in 0..new_h {
            let qy = ((T::lit(y as f64) + half) * sy - half).max(T::zero()).min(max_y);
            for x in 0..new_w {
                let qx = ((T::lit(x as f64) + half) * sx - half).max(T::zero()).min(max_x);
                let s = BilinearSite::new(qx, qy, self.width, self.height);
                for c in 0..self.channels {
                    out.set(c, x, y, s.sample(self, c));
                }
            }
        }
        out
    }

    /// Encodes as 8-bit PNG; intensities are scaled by 255 and rounded half up.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut bytes), self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.to_interleaved_u8())?;
        }
        Ok(bytes)
    }

    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * self.channels);
        let scale = T::lit(255.0);
        let half = T::lit(0.5);
        for i in 0..n {
            for c in 0..self.channels {
                let v = (self.data[c * n + i] * scale + half).floor();
                out.push(v.to_f64_lossy().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    /// Decodes 8- or 16-bit grayscale/RGB PNG (alpha is dropped, palettes
    /// expanded) into `[0, 1]` intensities.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?];
        let info = reader.next_frame(&mut buf)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let (src_channels, channels) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
        };
        let n = w * h;
        let mut data = vec![T::zero(); n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = T::lit(buf[i * src_channels + c] as f64 / 255.0);
            }
        }
        Self::new(w, h, channels, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Bilinear sampling footprint at a continuous source location inside the
/// frame. The cell origin is clamped so both fractional weights lie in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearSite<T> {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> BilinearSite<T> {
    /// `qx ∈ [0, w−1]`, `qy ∈ [0, h−1]`.
    #[inline]
    pub fn new(qx: T, qy: T, w: usize, h: usize) -> Self {
        // Truncation equals floor here because both coordinates are >= 0.
        let x0 = qx.to_usize().unwrap_or(0).min(w.saturating_sub(2));
        let y0 = qy.to_usize().unwrap_or(0).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = qx - T::lit(x0 as f64);
        let fy = qy - T::lit(y0 as f64);
        Self { x0, y0, x1, y1, fx, fy }
    }

    #[inline]
    pub fn corners(&self, img: &ImageBuffer<T>, c: usize) -> [T; 4] {
        [img.get(c, self.x0, self.y0), img.get(c, self.x1, self.y0), img.get(c, self.x0, self.y1), img.get(c, self.x1, self.y1)]
    }

    #[inline]
    pub fn sample(&self, img: &ImageBuffer<T>, c: usize) -> T {
        let [i00, i10, i01, i11] = self.corners(img, c);
        let one = T::one();
        (one - self.fy) * ((one - self.fx) * i00 + self.fx * i10) + self.fy * ((one - self.fx) * i01 + self.fx * i11)
    }

    /// Partial derivatives of the bilinear interpolant with respect to the
    /// sample location.
    #[inline]
    pub fn gradient(&self, img: &ImageBuffer<T>, c: usize) -> (T, T) {
        let [i00, i10, i01, i11] = self.corners(img, c);
        let one = T::one();
        let dx = (one - self.fy) * (i10 - i00) + self.fy * (i11 - i01);
        let dy = (one - self.fx) * (i01 - i00) + self.fx * (i11 - i10);
        (dx, dy)
    }
}

/// Marks output pixels whose source sample fell inside the source frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn filled(width: usize, height: usize, valid: bool) -> Self {
        Self { width, height, bits: vec![valid; width * height] }
    }

    /// Treats pixels that are exactly zero in every channel as warp fill.
    /// Scene content is never pure black in the synthetic renders, and a
    /// black pixel in a photograph loses nothing by being treated as fill.
    pub fn from_zero_fill<T: Real>(img: &ImageBuffer<T>) -> Self {
        let n = img.width() * img.height();
        let bits = (0..n).map(|i| (0..img.channels()).any(|c| img.data()[c * n + i] != T::zero())).collect();
        Self { width: img.width(), height: img.height(), bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn all_valid(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("mask dimensions differ".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Self { width: self.width, height: self.height, bits })
    }

    /// Inclusive `(x0, y0, x1, y1)` of the valid pixels.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Shrinks the valid region by `r` pixels (Chebyshev distance).
    pub fn eroded(&self, r: usize) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let near_edge = x < r || y < r || x + r >= self.width || y + r >= self.height;
                let ok = !near_edge
                    && (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| self.get(xx, yy)));
                out.set(x, y, ok);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(ImageBuffer::<f64>::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::<f64>::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::<f64>::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuffer::<f64>::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_levels() {
        let img = ImageBuffer::<f64>::from_fn(5, 3, 3, |c, x, y| ((c * 31 + x * 17 + y * 53) % 256) as f64 / 255.0);
        let bytes = img.to_png_bytes().unwrap();
        let back = ImageBuffer::<f64>::from_png_bytes(&bytes).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back, img);
        let gray = img.to_grayscale();
        let back = ImageBuffer::<f32>::from_png_bytes(&gray.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.channels(), 1);
    }

    #[test]
    fn save_rounds_half_up() {
        // 0.5 / 255 sits exactly between levels 0 and 1.
        let img = ImageBuffer::<f64>::new(2, 1, 1, vec![0.5 / 255.0, 0.49 / 255.0]).unwrap();
        assert_eq!(img.to_interleaved_u8(), vec![1, 0]);
    }

    #[test]
    fn resize_same_size_is_identity_and_constant_stays_constant() {
        let img = ImageBuffer::<f64>::from_fn(6, 4, 1, |_, x, y| (x + y) as f64 / 10.0);
        assert_eq!(img.resize(6, 4), img);
        let flat = ImageBuffer::<f64>::from_fn(9, 7, 3, |_, _, _| 0.3);
        let r = flat.resize(4, 5);
        assert!(r.data().iter().all(|v| (*v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn mask_helpers() {
        let mut m = ValidityMask::filled(5, 5, true);
        m.set(0, 0, false);
        assert_eq!(m.count(), 24);
        assert_eq!(m.bounding_box(), Some((0, 0, 4, 4)));
        let e = m.eroded(1);
        assert!(!e.get(1, 1));
        assert!(e.get(2, 2));
        assert!(!e.get(4, 2));
        assert_eq!(ValidityMask::filled(3, 3, false).bounding_box(), None);
    }
}
