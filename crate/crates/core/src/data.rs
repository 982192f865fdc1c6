//! Image datasets: PNG folder ingestion and procedural synthetic sets.
//!
//! All images are held as `[H, W, 3]` tensors with values in [-1, 1].

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seed_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Dataset<T> {
    images: Vec<Tensor<T>>,
    resolution: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn from_images(images: Vec<Tensor<T>>, resolution: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [resolution, resolution, 3] {
                return Err(Error::Dataset(format!(
                    "image {} has shape {:?}, expected [{resolution}, {resolution}, 3]",
                    i,
                    img.shape()
                )));
            }
        }
        Ok(Dataset { images, resolution })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn image(&self, i: usize) -> &Tensor<T> {
        &self.images[i]
    }

    /// Stacks the given images into a `[B, H, W, 3]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let r = self.resolution;
        let page = r * r * 3;
        let mut out = Tensor::zeros(&[indices.len(), r, r, 3]);
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.images.len() {
                return Err(Error::Dataset(format!("index {} out of {}", i, self.images.len())));
            }
            out.data_mut()[row * page..(row + 1) * page].copy_from_slice(self.images[i].data());
        }
        Ok(out)
    }

    /// Uniformly sampled batch with replacement.
    pub fn sample_batch(&self, rng: &mut impl Rng, batch: usize) -> Result<Tensor<T>> {
        let indices: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..self.images.len())).collect();
        self.batch(&indices)
    }
}

fn to_signed<T: Scalar>(byte: u8) -> T {
    T::from_f64(2.0 * byte as f64 / 255.0 - 1.0)
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Center-crops to a square and resizes with nearest-neighbour sampling.
fn crop_resize<T: Scalar>(rgb: &image::RgbImage, resolution: usize) -> Tensor<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let side = w.min(h);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    Tensor::from_fn(&[resolution, resolution, 3], |idx| {
        let c = idx % 3;
        let x = (idx / 3) % resolution;
        let y = idx / 3 / resolution;
        let sx = x0 + x * side / resolution;
        let sy = y0 + y * side / resolution;
        to_signed(rgb.get_pixel(sx as u32, sy as u32).0[c])
    })
}

/// Loads every decodable image under `path`, sorted by file name.
/// Unreadable files are skipped with a warning; an empty result is an
/// error.
pub fn load_png_folder<T: Scalar>(path: &Path, resolution: usize) -> Result<Dataset<T>> {
    if resolution == 0 {
        return Err(Error::Dataset("zero resolution".into()));
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut images = Vec::new();
    for file in entries {
        match image::open(&file) {
            Ok(img) => images.push(crop_resize(&img.to_rgb8(), resolution)),
            Err(e) => eprintln!("warning: skipping {}: {e}", file.display()),
        }
    }
    Dataset::from_images(images, resolution)
}

/// Writes an `[H, W, 3]` image in [-1, 1] as an 8-bit PNG.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::invalid("save_png", format!("expected [H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v.to_f64())).collect();
    let buf = image::RgbImage::from_raw(w, h, bytes)
        .ok_or_else(|| Error::invalid("save_png", "buffer size mismatch"))?;
    buf.save(path)
        .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))
}

/// Soft Gaussian blobs on a dark background; deterministic per seed.
pub fn synth_blobs<T: Scalar>(count: usize, resolution: usize, seed: u64) -> Result<Dataset<T>> {
    if count == 0 || resolution == 0 {
        return Err(Error::Dataset("count and resolution must be positive".into()));
    }
    let r = resolution as f64;
    let images = (0..count)
        .map(|i| {
            let rng = &mut seed_rng(seed, &format!("blobs.{i}"));
            let n_blobs = rng.gen_range(1..=3);
            let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..n_blobs)
                .map(|_| {
                    let center = [rng.gen_range(0.0..r), rng.gen_range(0.0..r)];
                    let sigma = rng.gen_range(r / 8.0..r / 3.0);
                    let color = [
                        rng.gen_range(0.0..2.0),
                        rng.gen_range(0.0..2.0),
                        rng.gen_range(0.0..2.0),
                    ];
                    (center, sigma, color)
                })
                .collect();
            Tensor::from_fn(&[resolution, resolution, 3], |idx| {
                let c = idx % 3;
                let x = ((idx / 3) % resolution) as f64;
                let y = (idx / 3 / resolution) as f64;
                let mut v = -1.0;
                for (center, sigma, color) in &blobs {
                    let d2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
                    v += color[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                T::from_f64(v.clamp(-1.0, 1.0))
            })
        })
        .collect();
    Dataset::from_images(images, resolution)
}

/// Oriented sinusoidal gratings with per-channel phase offsets;
/// deterministic per seed.
pub fn synth_textures<T: Scalar>(count: usize, resolution: usize, seed: u64) -> Result<Dataset<T>> {
    if count == 0 || resolution == 0 {
        return Err(Error::Dataset("count and resolution must be positive".into()));
    }
    let r = resolution as f64;
    let images = (0..count)
        .map(|i| {
            let rng = &mut seed_rng(seed, &format!("textures.{i}"));
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(1.0..6.0);
            let phases = [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            let amp = rng.gen_range(0.4..1.0);
            Tensor::from_fn(&[resolution, resolution, 3], |idx| {
                let c = idx % 3;
                let x = ((idx / 3) % resolution) as f64 / r;
                let y = (idx / 3 / resolution) as f64 / r;
                let t = theta.cos() * x + theta.sin() * y;
                T::from_f64((amp * (std::f64::consts::TAU * freq * t + phases[c]).sin()).clamp(-1.0, 1.0))
            })
        })
        .collect();
    Dataset::from_images(images, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_hits_the_documented_values() {
        assert_eq!(to_signed::<f64>(0), -1.0);
        assert_eq!(to_signed::<f64>(255), 1.0);
        let gray = to_signed::<f64>(128);
        assert!((gray - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-12);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(-3.0), 0);
    }

    #[test]
    fn synthetic_sets_are_deterministic_and_bounded() {
        let a: Dataset<f32> = synth_blobs(5, 16, 9).unwrap();
        let b: Dataset<f32> = synth_blobs(5, 16, 9).unwrap();
        let c: Dataset<f32> = synth_blobs(5, 16, 10).unwrap();
        assert_eq!(a.len(), 5);
        for i in 0..5 {
            assert_eq!(a.image(i).data(), b.image(i).data());
            assert!(a.image(i).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        assert_ne!(a.image(0).data(), c.image(0).data());

        let t: Dataset<f32> = synth_textures(3, 16, 9).unwrap();
        let t2: Dataset<f32> = synth_textures(3, 16, 9).unwrap();
        for i in 0..3 {
            assert_eq!(t.image(i).data(), t2.image(i).data());
            assert!(t.image(i).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn batches_stack_rows_in_order() {
        let ds: Dataset<f64> = synth_blobs(4, 8, 1).unwrap();
        let b = ds.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 8, 8, 3]);
        assert_eq!(&b.data()[..8 * 8 * 3], ds.image(2).data());
        assert_eq!(&b.data()[8 * 8 * 3..], ds.image(0).data());
        assert!(ds.batch(&[7]).is_err());
        assert!(ds.batch(&[]).is_err());
    }
}
