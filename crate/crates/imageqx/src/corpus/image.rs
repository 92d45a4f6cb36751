//! In-memory image tensor and 8-bit PNG round-tripping.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// RGB image with values in `[0,1]`, stored channel-first `(3, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    pub fn filled(resolution: usize, rgb: [f32; 3]) -> Self {
        let mut data = Array3::zeros((3, resolution, resolution));
        for c in 0..3 {
            data.index_axis_mut(ndarray::Axis(0), c).fill(rgb[c]);
        }
        Self { data }
    }

    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        let (ch, h, w) = data.dim();
        if ch != 3 || h != w {
            return Err(Error::Argument(format!(
                "expected square 3-channel image, got {ch}x{h}x{w}"
            )));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel values outside [0,1]".into()));
        }
        Ok(Self { data })
    }

    pub fn resolution(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        [
            self.data[[0, row, col]],
            self.data[[1, row, col]],
            self.data[[2, row, col]],
        ]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        for c in 0..3 {
            self.data[[c, row, col]] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub(crate) fn map_values(&mut self, f: impl Fn(f32) -> f32) {
        self.data.mapv_inplace(|v| f(v).clamp(0.0, 1.0));
    }

    /// Mean over all channels and pixels.
    pub fn mean_luminance(&self) -> f32 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Per-channel pixel variance, averaged over channels.
    pub fn mean_channel_variance(&self) -> f32 {
        let n = (self.resolution() * self.resolution()) as f32;
        let mut total = 0.0;
        for c in 0..3 {
            let ch = self.data.index_axis(ndarray::Axis(0), c);
            let mean = ch.sum() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
            total += var;
        }
        total / 3.0
    }

    /// Fraction of pixels that differ from `other` in any channel.
    pub fn fraction_differing(&self, other: &ImageTensor) -> f32 {
        let res = self.resolution();
        let mut differing = 0usize;
        for r in 0..res {
            for c in 0..res {
                if self.get(r, c) != other.get(r, c) {
                    differing += 1;
                }
            }
        }
        differing as f32 / (res * res) as f32
    }

    /// Quantize to 8-bit RGB and write a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = self.resolution() as u32;
        let mut img = image::RgbImage::new(res, res);
        for (r, c, px) in (0..res).flat_map(|r| (0..res).map(move |c| (r, c))).map(|(r, c)| {
            let rgb = self.get(r as usize, c as usize);
            (r, c, image::Rgb(rgb.map(|v| (v * 255.0).round() as u8)))
        }) {
            img.put_pixel(c, r, px);
        }
        img.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    /// Read an 8-bit PNG and dequantize by `/255`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(Error::Data(format!(
                "image {} is {w}x{h}, expected square",
                path.display()
            )));
        }
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (c, r, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[[ch, r as usize, c as usize]] = px.0[ch] as f32 / 255.0;
            }
        }
        Ok(Self { data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ImageTensor::filled(16, [0.2, 0.5, 0.8]);
        img.set(3, 7, [0.123, 0.456, 0.789]);
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back.resolution(), 16);
        for (a, b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut arr = Array3::zeros((3, 8, 8));
        arr[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::from_array(arr).is_err());
    }
}
