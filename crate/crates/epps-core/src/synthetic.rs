//! In-memory circle fixtures for fast end-to-end checks.
//!
//! Each sample is a noisy image with one bright disk; the mask is the disk.
//! The contrast gap between disk and background is wide enough that a small
//! model can overfit a handful of samples in a few dozen epochs, which keeps
//! convergence tests quick without touching the filesystem.

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{bits_to_tensor, Sample, SampleSource};
use crate::edges::{extract_edge_bits, EdgeOperator};
use crate::error::{EppsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NOISE_AMPLITUDE: f64 = 0.35;
const DISK_LIFT: f64 = 0.55;

/// Raw per-sample geometry plus pixel data, before tensor conversion.
struct Circle {
    id: String,
    /// Channel-major RGB pixels in `[0, 1]`, length `3 * side * side`.
    pixels: Vec<f64>,
    mask_bits: Vec<u8>,
}

fn generate_circles(n: usize, side: usize, seed: u64) -> Vec<Circle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let cx = rng.random_range(side as f64 / 4.0..side as f64 * 3.0 / 4.0);
            let cy = rng.random_range(side as f64 / 4.0..side as f64 * 3.0 / 4.0);
            let radius = rng.random_range(side as f64 / 6.0..side as f64 / 4.0);
            let mask_bits: Vec<u8> = (0..side * side)
                .map(|p| {
                    let (y, x) = ((p / side) as f64, (p % side) as f64);
                    u8::from((x - cx).powi(2) + (y - cy).powi(2) <= radius * radius)
                })
                .collect();
            let mut pixels = Vec::with_capacity(3 * side * side);
            for _c in 0..3 {
                for p in 0..side * side {
                    let noise = rng.random_range(0.0..NOISE_AMPLITUDE);
                    pixels.push(noise + DISK_LIFT * mask_bits[p] as f64);
                }
            }
            Circle {
                id: format!("circle_{i:02}"),
                pixels,
                mask_bits,
            }
        })
        .collect()
}

/// A fixed set of circle samples, generated once and served from memory.
pub struct SyntheticDataset<S: Scalar> {
    samples: Vec<Sample<S>>,
    side: usize,
}

impl<S: Scalar> SyntheticDataset<S> {
    /// `n` random circles on `side`×`side` canvases, deterministic in `seed`.
    pub fn circles(n: usize, side: usize, seed: u64, edge_op: &EdgeOperator) -> Result<Self> {
        if n == 0 || side == 0 {
            return Err(EppsError::config("circle fixture needs n > 0 and side > 0"));
        }
        let samples = generate_circles(n, side, seed)
            .into_iter()
            .map(|c| {
                let edge_bits = extract_edge_bits(&c.mask_bits, side, side, edge_op)?;
                Ok(Sample {
                    image: Tensor::new(vec![3, side, side], c.pixels.iter().map(|&v| S::cast(v)).collect::<Vec<_>>()),
                    mask: bits_to_tensor(&c.mask_bits, side, side),
                    edge: bits_to_tensor(&edge_bits, side, side),
                    id: c.id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticDataset { samples, side })
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

impl<S: Scalar> SampleSource<S> for SyntheticDataset<S> {
    fn load_sample(&self, id: &str) -> Result<Sample<S>> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .cloned()
            .ok_or_else(|| EppsError::config(format!("unknown synthetic sample id '{id}'")))
    }
}

/// Materializes the same circles as a folder dataset (`images/` + `masks/`
/// PNGs) so the CLI path can be exercised against a tiny corpus.
pub fn write_circle_dataset(root: &Path, n: usize, side: usize, seed: u64) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)
        .map_err(|e| EppsError::io(format!("creating {}", images.display()), e))?;
    std::fs::create_dir_all(&masks)
        .map_err(|e| EppsError::io(format!("creating {}", masks.display()), e))?;
    let s = side as u32;
    for c in generate_circles(n, side, seed) {
        let mut img = RgbImage::new(s, s);
        for (p, px) in img.pixels_mut().enumerate() {
            for ch in 0..3 {
                px.0[ch] = (c.pixels[ch * side * side + p] * 255.0).round() as u8;
            }
        }
        let mut msk = GrayImage::new(s, s);
        for (p, px) in msk.pixels_mut().enumerate() {
            px.0[0] = c.mask_bits[p] * 255;
        }
        let image_path = images.join(format!("{}.png", c.id));
        img.save(&image_path)
            .map_err(|e| EppsError::image(format!("writing {}", image_path.display()), e))?;
        let mask_path = masks.join(format!("{}.png", c.id));
        msk.save(&mask_path)
            .map_err(|e| EppsError::image(format!("writing {}", mask_path.display()), e))?;
    }
    Ok(())
}
