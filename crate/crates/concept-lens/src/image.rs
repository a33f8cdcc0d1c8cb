//! Square RGB images stored as `f64` in `[0, 1]`.
//!
//! All pipeline stages operate on [`PixelImage`]; conversion to 8-bit only
//! happens at the PNG boundary. Layout is row-major HWC: index
//! `(y * resolution + x) * 3 + channel`.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A square RGB image with float pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage {
    resolution: usize,
    data: Vec<f64>,
}

impl PixelImage {
    /// A uniform grey image (all channels 0.5), the optimiser's neutral point.
    pub fn grey(resolution: usize) -> Self {
        Self::filled(resolution, 0.5)
    }

    /// A uniform image with every channel set to `value`.
    pub fn filled(resolution: usize, value: f64) -> Self {
        PixelImage {
            resolution,
            data: vec![value; resolution * resolution * CHANNELS],
        }
    }

    /// Wraps raw HWC data. The length must be `resolution^2 * 3`.
    pub fn from_data(resolution: usize, data: Vec<f64>) -> Result<Self> {
        let expected = resolution * resolution * CHANNELS;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "image data has {} values, expected {} for resolution {}",
                data.len(),
                expected,
                resolution
            )));
        }
        Ok(PixelImage { resolution, data })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let base = (y * self.resolution + x) * CHANNELS;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let base = (y * self.resolution + x) * CHANNELS;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    /// True when every channel lies in `[0, 1]`.
    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Clamps every channel into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear resample to a new resolution. Identity when the resolution
    /// already matches.
    pub fn resized(&self, resolution: usize) -> Self {
        if resolution == self.resolution {
            return self.clone();
        }
        PixelImage {
            resolution,
            data: bilinear_resize(
                &self.data,
                self.resolution,
                self.resolution,
                resolution,
                resolution,
            ),
        }
    }

    /// Loads a PNG or JPEG, converts to RGB, and bilinearly resizes the float
    /// data to `resolution`.
    pub fn load(path: &Path, resolution: usize) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::ImageCodec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data: Vec<f64> = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        let resized = bilinear_resize(&data, h, w, resolution, resolution);
        PixelImage::from_data(resolution, resized)
    }

    /// Saves as an 8-bit PNG, clamping to `[0, 1]` first.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.resolution as u32, self.resolution as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::ImageCodec {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    /// Encodes the image as PNG bytes in memory.
    pub fn png_bytes(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.resolution as u32, self.resolution as u32, bytes)
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }
}

/// Bilinear resample of an interleaved `src_h x src_w x 3` buffer to
/// `dst_h x dst_w x 3`, using half-pixel centre alignment. Resampling to the
/// same size reproduces the input exactly, which the multi-resolution
/// composition relies on.
pub(crate) fn bilinear_resize(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), src_h * src_w * CHANNELS);
    let mut dst = vec![0.0; dst_h * dst_w * CHANNELS];
    for (oy, ox, taps) in bilinear_taps(src_h, src_w, dst_h, dst_w) {
        let out_base = (oy * dst_w + ox) * CHANNELS;
        for (src_idx, weight) in taps {
            let in_base = src_idx * CHANNELS;
            for c in 0..CHANNELS {
                dst[out_base + c] += weight * src[in_base + c];
            }
        }
    }
    dst
}

/// The four (source pixel, weight) taps for every destination pixel of a
/// bilinear resample. Shared between the plain resampler above and the
/// differentiable upsampling op, so their forward values match bit for bit.
pub(crate) fn bilinear_taps(
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> impl Iterator<Item = (usize, usize, [(usize, f64); 4])> {
    let scale_y = src_h as f64 / dst_h as f64;
    let scale_x = src_w as f64 / dst_w as f64;
    (0..dst_h).flat_map(move |oy| {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy.floor() as usize).min(src_h - 1);
        let y1 = (y0 + 1).min(src_h - 1);
        let fy = sy - y0 as f64;
        (0..dst_w).map(move |ox| {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx.floor() as usize).min(src_w - 1);
            let x1 = (x0 + 1).min(src_w - 1);
            let fx = sx - x0 as f64;
            let taps = [
                (y0 * src_w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * src_w + x1, (1.0 - fy) * fx),
                (y1 * src_w + x0, fy * (1.0 - fx)),
                (y1 * src_w + x1, fy * fx),
            ];
            (oy, ox, taps)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let src: Vec<f64> = (0..4 * 4 * 3).map(|i| (i as f64) / 47.0).collect();
        let out = bilinear_resize(&src, 4, 4, 4, 4);
        assert_eq!(src, out);
    }

    #[test]
    fn upscale_of_constant_stays_constant() {
        let src = vec![0.25; 2 * 2 * 3];
        let out = bilinear_resize(&src, 2, 2, 7, 7);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn upscale_interpolates_between_neighbours() {
        // 1x2 source, channel 0 values 0 and 1; doubling width puts the two
        // outer samples on the originals and the inner ones at 1/4 and 3/4.
        let mut src = vec![0.0; 1 * 2 * 3];
        src[3] = 1.0;
        let out = bilinear_resize(&src, 1, 2, 1, 4);
        let ch0: Vec<f64> = out.chunks(3).map(|p| p[0]).collect();
        assert!((ch0[0] - 0.0).abs() < 1e-12);
        assert!((ch0[1] - 0.25).abs() < 1e-12);
        assert!((ch0[2] - 0.75).abs() < 1e-12);
        assert!((ch0[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn png_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = PixelImage::grey(8);
        img.set_pixel(3, 5, [0.0, 0.5, 1.0]);
        img.save_png(&path).unwrap();
        let back = PixelImage::load(&path, 8).unwrap();
        assert_eq!(back.resolution(), 8);
        // 8-bit quantisation allows at most half a step of error.
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn from_data_rejects_bad_length() {
        assert!(PixelImage::from_data(4, vec![0.0; 10]).is_err());
    }
}
