//! Folder-dataset loading, deterministic splits, and augmentation.
//!
//! A dataset is a directory with `images/*.png` (8-bit RGB) and
//! `masks/*.png` (8-bit grayscale, foreground > 127), matched by filename
//! stem. Samples are resized to a square working resolution (bilinear for
//! images, nearest for masks) and the edge ground truth is derived from the
//! resized mask. Augmentation applies one shared spatial transform — a mild
//! rotation plus coin-flip mirrorings — to image and mask, then rebuilds the
//! edge map from the transformed mask so the two can never drift apart.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edges::{extract_edge_bits, EdgeOperator};
use crate::error::{EppsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_RESOLUTION: usize = 256;

/// One training example: image in `[0,1]`, binary mask and binary edge map,
/// all at the same square resolution.
#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<S>,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor<S>,
    /// `[1, H, W]`, values in `{0, 1}`, derived from `mask`.
    pub edge: Tensor<S>,
    /// Source filename stem.
    pub id: String,
}

/// Deterministic 8:1:1 partition of sample ids (remainder goes to train).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplits {
    /// Shuffles `ids` with `seed` and cuts train/val/test as
    /// `n - 2*(n/10) / n/10 / n/10`.
    pub fn compute(ids: &[String], seed: u64) -> DatasetSplits {
        let mut order = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n = order.len();
        let tenth = n / 10;
        let test = order.split_off(n - tenth);
        let val = order.split_off(n - 2 * tenth);
        DatasetSplits {
            seed,
            train: order,
            val,
            test,
        }
    }

    /// Checks the partition against the full id list: pairwise disjoint and
    /// jointly exhaustive.
    pub fn validate(&self, ids: &[String]) -> Result<()> {
        let mut seen: Vec<&String> = self.train.iter().chain(&self.val).chain(&self.test).collect();
        if seen.len() != ids.len() {
            return Err(EppsError::config(format!(
                "split manifest covers {} ids, dataset has {}",
                seen.len(),
                ids.len()
            )));
        }
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(EppsError::config("split manifest assigns an id twice"));
        }
        let mut all: Vec<&String> = ids.iter().collect();
        all.sort();
        if seen != all {
            return Err(EppsError::config("split manifest does not match the dataset ids"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| EppsError::json("encoding split manifest", e))?;
        fs::write(path, text).map_err(|e| EppsError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<DatasetSplits> {
        let text = fs::read_to_string(path)
            .map_err(|e| EppsError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| EppsError::json(format!("parsing {}", path.display()), e))
    }
}

/// Handle to an image/mask folder; loading is pure per id, so a shared
/// reference can serve several workers at once.
#[derive(Debug)]
pub struct Dataset {
    images_dir: PathBuf,
    masks_dir: PathBuf,
    resolution: usize,
    edge_op: EdgeOperator,
    ids: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path, resolution: usize, edge_op: EdgeOperator) -> Result<Dataset> {
        if resolution == 0 {
            return Err(EppsError::config("resolution must be positive"));
        }
        edge_op.validate()?;
        let images_dir = root.join("images");
        let masks_dir = root.join("masks");
        for dir in [&images_dir, &masks_dir] {
            if !dir.is_dir() {
                return Err(EppsError::config(format!("missing dataset directory {}", dir.display())));
            }
        }
        let mut ids = Vec::new();
        let listing = fs::read_dir(&images_dir)
            .map_err(|e| EppsError::io(format!("listing {}", images_dir.display()), e))?;
        for entry in listing {
            let path = entry
                .map_err(|e| EppsError::io(format!("listing {}", images_dir.display()), e))?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let mask_path = masks_dir.join(format!("{stem}.png"));
            if !mask_path.is_file() {
                return Err(EppsError::dataset(format!("no mask for image {stem}.png"), mask_path));
            }
            ids.push(stem.to_string());
        }
        if ids.is_empty() {
            return Err(EppsError::dataset("no PNG images found", &images_dir));
        }
        ids.sort();
        Ok(Dataset {
            images_dir,
            masks_dir,
            resolution,
            edge_op,
            ids,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn edge_operator(&self) -> &EdgeOperator {
        &self.edge_op
    }

    pub fn splits(&self, seed: u64) -> DatasetSplits {
        DatasetSplits::compute(&self.ids, seed)
    }

    /// Loads and resizes one sample by id.
    pub fn load<S: Scalar>(&self, id: &str) -> Result<Sample<S>> {
        let image_path = self.images_dir.join(format!("{id}.png"));
        if !self.ids.iter().any(|i| i == id) {
            return Err(EppsError::dataset(format!("unknown sample id '{id}'"), image_path));
        }
        let mask_path = self.masks_dir.join(format!("{id}.png"));
        let r = self.resolution as u32;
        let image = image::open(&image_path)
            .map_err(|e| EppsError::image(format!("decoding {}", image_path.display()), e))?
            .to_rgb8();
        let image = imageops::resize(&image, r, r, FilterType::Triangle);
        let mask = image::open(&mask_path)
            .map_err(|e| EppsError::image(format!("decoding {}", mask_path.display()), e))?
            .to_luma8();
        let mask = imageops::resize(&mask, r, r, FilterType::Nearest);

        let res = self.resolution;
        let image = Tensor::from_fn(vec![3, res, res], |i| {
            let (c, rest) = (i / (res * res), i % (res * res));
            let (y, x) = (rest / res, rest % res);
            S::cast(image.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
        });
        let mask_bits: Vec<u8> = mask.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
        let edge_bits = extract_edge_bits(&mask_bits, res, res, &self.edge_op)?;
        Ok(Sample {
            image,
            mask: bits_to_tensor(&mask_bits, res, res),
            edge: bits_to_tensor(&edge_bits, res, res),
            id: id.to_string(),
        })
    }
}

/// Anything that can serve samples by id: folder datasets on disk or
/// in-memory fixtures. The training loop only sees this trait.
pub trait SampleSource<S: Scalar> {
    fn load_sample(&self, id: &str) -> Result<Sample<S>>;
}

impl<S: Scalar> SampleSource<S> for Dataset {
    fn load_sample(&self, id: &str) -> Result<Sample<S>> {
        self.load(id)
    }
}

/// Opens the dataset and computes its seeded splits in one call.
pub fn load_dataset(root: &Path, resolution: usize, seed: u64, edge_op: EdgeOperator) -> Result<(Dataset, DatasetSplits)> {
    let dataset = Dataset::open(root, resolution, edge_op)?;
    let splits = dataset.splits(seed);
    Ok((dataset, splits))
}

pub(crate) fn bits_to_tensor<S: Scalar>(bits: &[u8], h: usize, w: usize) -> Tensor<S> {
    Tensor::from_fn(vec![1, h, w], |i| if bits[i] != 0 { S::one() } else { S::zero() })
}

pub(crate) fn tensor_to_bits<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    t.as_slice().iter().map(|&v| u8::from(v.cast_f64() > 0.5)).collect()
}

/// Inverse-maps output pixel `(yo, xo)` through a rotation by `angle`
/// degrees about the image centre (a quarter turn sends row r, column c to
/// row c, column N-1-r).
fn source_coords(yo: usize, xo: usize, h: usize, w: usize, angle: f64) -> (f64, f64) {
    let rad = angle.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dy = yo as f64 - cy;
    let dx = xo as f64 - cx;
    (cos * dy - sin * dx + cy, sin * dy + cos * dx + cx)
}

fn rotate_bits_nearest(bits: &[u8], h: usize, w: usize, angle: f64) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for yo in 0..h {
        for xo in 0..w {
            let (ys, xs) = source_coords(yo, xo, h, w, angle);
            let yr = ys.round();
            let xr = xs.round();
            if yr >= 0.0 && xr >= 0.0 && (yr as usize) < h && (xr as usize) < w {
                out[yo * w + xo] = bits[yr as usize * w + xr as usize];
            }
        }
    }
    out
}

fn rotate_image_bilinear<S: Scalar>(image: &Tensor<S>, angle: f64) -> Tensor<S> {
    let shape = image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let src = image.as_slice();
    let sample_at = |ch: usize, ys: f64, xs: f64| -> f64 {
        // Zero outside the frame; interpolate between the four neighbours.
        let y0 = ys.floor();
        let x0 = xs.floor();
        let ty = ys - y0;
        let tx = xs - x0;
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
            for (dx, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
                let y = y0 + dy;
                let x = x0 + dx;
                if wy * wx > 0.0 && y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                    acc += wy * wx * src[(ch * h + y as usize) * w + x as usize].cast_f64();
                }
            }
        }
        acc
    };
    Tensor::from_fn(shape.clone(), |i| {
        let ch = i / (h * w);
        let yo = (i / w) % h;
        let xo = i % w;
        let (ys, xs) = source_coords(yo, xo, h, w, angle);
        S::cast(sample_at(ch, ys, xs))
    })
}

fn flipped_index(i: usize, h: usize, w: usize, vertical: bool, horizontal: bool) -> usize {
    let plane = i / (h * w);
    let mut y = (i / w) % h;
    let mut x = i % w;
    if vertical {
        y = h - 1 - y;
    }
    if horizontal {
        x = w - 1 - x;
    }
    (plane * h + y) * w + x
}

fn flip_tensor<S: Scalar>(t: &Tensor<S>, vertical: bool, horizontal: bool) -> Tensor<S> {
    if !vertical && !horizontal {
        return t.clone();
    }
    let shape = t.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let src = t.as_slice();
    Tensor::from_fn(shape.clone(), |i| src[flipped_index(i, h, w, vertical, horizontal)])
}

fn flip_bits(bits: &[u8], h: usize, w: usize, vertical: bool, horizontal: bool) -> Vec<u8> {
    (0..bits.len())
        .map(|i| bits[flipped_index(i, h, w, vertical, horizontal)])
        .collect()
}

/// Applies one explicit spatial transform — rotation by `angle` degrees,
/// then optional vertical/horizontal mirroring — to the whole sample. The
/// edge map is regenerated from the transformed mask rather than transformed
/// itself.
pub fn apply_transform<S: Scalar>(
    sample: &Sample<S>,
    angle: f64,
    vflip: bool,
    hflip: bool,
    edge_op: &EdgeOperator,
) -> Result<Sample<S>> {
    let mask_shape = sample.mask.shape();
    let (h, w) = (mask_shape[1], mask_shape[2]);
    let mut mask_bits = tensor_to_bits(&sample.mask);
    let mut image = if angle != 0.0 {
        mask_bits = rotate_bits_nearest(&mask_bits, h, w, angle);
        rotate_image_bilinear(&sample.image, angle)
    } else {
        sample.image.clone()
    };
    if vflip || hflip {
        image = flip_tensor(&image, vflip, hflip);
        mask_bits = flip_bits(&mask_bits, h, w, vflip, hflip);
    }
    let edge_bits = extract_edge_bits(&mask_bits, h, w, edge_op)?;
    Ok(Sample {
        image,
        mask: bits_to_tensor(&mask_bits, h, w),
        edge: bits_to_tensor(&edge_bits, h, w),
        id: sample.id.clone(),
    })
}

/// Draws a transform (rotation angle uniform in `±rotation_degrees`, then
/// independent coin-flip mirrorings) and applies it.
pub fn augment<S: Scalar, R: Rng + ?Sized>(
    sample: &Sample<S>,
    rng: &mut R,
    rotation_degrees: f64,
    edge_op: &EdgeOperator,
) -> Result<Sample<S>> {
    let angle = if rotation_degrees > 0.0 {
        rng.random_range(-rotation_degrees..=rotation_degrees)
    } else {
        0.0
    };
    let vflip = rng.random_bool(0.5);
    let hflip = rng.random_bool(0.5);
    apply_transform(sample, angle, vflip, hflip, edge_op)
}
