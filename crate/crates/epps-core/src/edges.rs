//! Annotation-free edge ground truth derived from binary masks.
//!
//! Every operator runs in exact integer arithmetic on the 0/1 mask, so the
//! resulting maps are deterministic and exactly equivariant under horizontal
//! and vertical flips. Responses on the background side of the boundary are
//! discarded: an edge pixel is always a foreground pixel whose neighbourhood
//! mixes foreground and background, so the edge map hugs the object.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EppsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which classical stencil generates the edge map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Sobel,
    Laplacian,
    Canny,
    Scharr,
    Prewitt,
}

impl EdgeKind {
    /// All supported operators, in a stable order.
    pub const ALL: [EdgeKind; 5] = [
        EdgeKind::Sobel,
        EdgeKind::Laplacian,
        EdgeKind::Canny,
        EdgeKind::Scharr,
        EdgeKind::Prewitt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Sobel => "sobel",
            EdgeKind::Laplacian => "laplacian",
            EdgeKind::Canny => "canny",
            EdgeKind::Scharr => "scharr",
            EdgeKind::Prewitt => "prewitt",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeKind {
    type Err = EppsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sobel" => Ok(EdgeKind::Sobel),
            "laplacian" => Ok(EdgeKind::Laplacian),
            "canny" => Ok(EdgeKind::Canny),
            "scharr" => Ok(EdgeKind::Scharr),
            "prewitt" => Ok(EdgeKind::Prewitt),
            other => Err(EppsError::config(format!(
                "unknown edge operator {other:?}; expected one of sobel, laplacian, canny, scharr, prewitt"
            ))),
        }
    }
}

fn default_canny_low() -> f64 {
    50.0
}

fn default_canny_high() -> f64 {
    150.0
}

/// An edge operator plus its tuning knobs.
///
/// `canny_low`/`canny_high` are hysteresis thresholds on the 0–255 gradient
/// scale and only matter for [`EdgeKind::Canny`]. `dilation_radius` thickens
/// the final map by a square (Chebyshev) structuring element; 0 keeps the raw
/// operator output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeOperator {
    pub kind: EdgeKind,
    #[serde(default)]
    pub dilation_radius: usize,
    #[serde(default = "default_canny_low")]
    pub canny_low: f64,
    #[serde(default = "default_canny_high")]
    pub canny_high: f64,
}

impl EdgeOperator {
    pub fn new(kind: EdgeKind) -> Self {
        EdgeOperator {
            kind,
            dilation_radius: 0,
            canny_low: default_canny_low(),
            canny_high: default_canny_high(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.canny_low.is_finite() || !self.canny_high.is_finite() {
            return Err(EppsError::config("canny thresholds must be finite"));
        }
        if self.kind == EdgeKind::Canny && !(self.canny_low < self.canny_high) {
            return Err(EppsError::config(format!(
                "canny_low ({}) must be strictly below canny_high ({})",
                self.canny_low, self.canny_high
            )));
        }
        if self.canny_low < 0.0 || self.canny_high < 0.0 {
            return Err(EppsError::config("canny thresholds must be non-negative"));
        }
        Ok(())
    }
}

impl Default for EdgeOperator {
    fn default() -> Self {
        EdgeOperator::new(EdgeKind::Canny)
    }
}

/// Extracts a binary edge map from a binary `[1, H, W]` mask tensor.
///
/// Errors if the tensor is not rank-3 with a single channel or contains
/// values other than exactly 0 and 1.
pub fn extract_edge_gt<S: Scalar>(mask: &Tensor<S>, op: &EdgeOperator) -> Result<Tensor<S>> {
    let dims = mask.shape();
    if dims.len() != 3 || dims[0] != 1 {
        return Err(EppsError::shape(format!(
            "edge extraction expects a [1, H, W] mask, got {dims:?}"
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let mut bits = Vec::with_capacity(h * w);
    for (i, v) in mask.iter().enumerate() {
        let x = v.cast_f64();
        if x == 0.0 {
            bits.push(0u8);
        } else if x == 1.0 {
            bits.push(1u8);
        } else {
            return Err(EppsError::config(format!(
                "mask must be binary, found {x} at flat index {i}"
            )));
        }
    }
    let edge = extract_edge_bits(&bits, h, w, op)?;
    let data: Vec<S> = edge.iter().map(|&b| S::cast(f64::from(b))).collect();
    Ok(Tensor::new(vec![1, h, w], data))
}

/// Integer-domain core: binary mask bits in row-major order → edge bits.
pub fn extract_edge_bits(mask: &[u8], h: usize, w: usize, op: &EdgeOperator) -> Result<Vec<u8>> {
    if mask.len() != h * w {
        return Err(EppsError::shape(format!(
            "mask buffer holds {} values but {h}x{w} needs {}",
            mask.len(),
            h * w
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&b| b > 1) {
        return Err(EppsError::config(format!(
            "mask bits must be 0 or 1, found {bad}"
        )));
    }
    op.validate()?;
    let mut edge = match op.kind {
        EdgeKind::Sobel => gradient_edges(mask, h, w, &SOBEL_X),
        EdgeKind::Prewitt => gradient_edges(mask, h, w, &PREWITT_X),
        EdgeKind::Scharr => gradient_edges(mask, h, w, &SCHARR_X),
        EdgeKind::Laplacian => {
            let resp = conv3_replicate(mask, h, w, &LAPLACIAN);
            resp.iter().map(|&r| u8::from(r != 0)).collect()
        }
        EdgeKind::Canny => canny_edges(mask, h, w, op.canny_low, op.canny_high),
    };
    // Keep only the foreground side of the response, and only pixels that
    // actually touch the background: smoothing (Canny) can spill response two
    // pixels deep on curved boundaries, and the edge must trace the object's
    // own boundary pixels.
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if edge[i] == 0 {
                continue;
            }
            edge[i] = u8::from(mask[i] == 1 && touches_background(mask, h, w, r, c));
        }
    }
    if op.dilation_radius > 0 {
        edge = dilate_chebyshev(&edge, h, w, op.dilation_radius);
    }
    Ok(edge)
}

/// True when any in-frame 8-neighbour of (r, c) is background.
fn touches_background(mask: &[u8], h: usize, w: usize, r: usize, c: usize) -> bool {
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                continue;
            }
            if mask[nr as usize * w + nc as usize] == 0 {
                return true;
            }
        }
    }
    false
}

/// Horizontal-derivative stencils; the vertical one is the transpose.
const SOBEL_X: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
const PREWITT_X: [[i32; 3]; 3] = [[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]];
const SCHARR_X: [[i32; 3]; 3] = [[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]];
const LAPLACIAN: [[i32; 3]; 3] = [[0, 1, 0], [1, -4, 1], [0, 1, 0]];

fn transpose3(k: &[[i32; 3]; 3]) -> [[i32; 3]; 3] {
    let mut t = [[0i32; 3]; 3];
    for (r, row) in k.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c][r] = v;
        }
    }
    t
}

fn gradient_edges(mask: &[u8], h: usize, w: usize, kx: &[[i32; 3]; 3]) -> Vec<u8> {
    let ky = transpose3(kx);
    let gx = conv3_replicate(mask, h, w, kx);
    let gy = conv3_replicate(mask, h, w, &ky);
    gx.iter()
        .zip(&gy)
        .map(|(&x, &y)| u8::from(x != 0 || y != 0))
        .collect()
}

/// 3x3 integer convolution with replicate padding.
fn conv3_replicate(mask: &[u8], h: usize, w: usize, k: &[[i32; 3]; 3]) -> Vec<i32> {
    let at = |r: isize, c: isize| -> i32 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        i32::from(mask[r * w + c])
    };
    let mut out = vec![0i32; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0i32;
            for (dr, row) in k.iter().enumerate() {
                for (dc, &kv) in row.iter().enumerate() {
                    if kv != 0 {
                        acc += kv * at(r + dr as isize - 1, c + dc as isize - 1);
                    }
                }
            }
            out[(r * w as isize + c) as usize] = acc;
        }
    }
    out
}

/// Full Canny pipeline on the mask scaled to 0–255, entirely in integers.
///
/// Smoothing uses the 5x5 binomial kernel (unit variance), gradients use the
/// 3x3 horizontal/vertical stencils above, non-maximum suppression keeps ties
/// so flipped inputs yield flipped outputs, and hysteresis grows strong
/// pixels through weak ones with 8-connectivity.
fn canny_edges(mask: &[u8], h: usize, w: usize, low: f64, high: f64) -> Vec<u8> {
    // Binomial [1,4,6,4,1] blur, separable, carrying the x256 numerator.
    let field: Vec<i32> = mask.iter().map(|&m| i32::from(m) * 255).collect();
    let blurred = blur5_replicate(&field, h, w);

    let gx = conv3_replicate_i32(&blurred, h, w, &SOBEL_X);
    let gy = conv3_replicate_i32(&blurred, h, w, &transpose3(&SOBEL_X));
    let mag2: Vec<i64> = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| i64::from(x) * i64::from(x) + i64::from(y) * i64::from(y))
        .collect();

    // Thresholds live on the 0-255 gradient scale; the integer pipeline
    // carries an extra x256 from the blur numerator, so square that in.
    let low2 = (low * 256.0) * (low * 256.0);
    let high2 = (high * 256.0) * (high * 256.0);

    // Non-maximum suppression along the quantized gradient direction.
    // Sector boundaries at tan(22.5deg) and tan(67.5deg) are compared with
    // integer cross-multiplication on |gx|, |gy| so flips cannot perturb the
    // sector choice. Out-of-frame neighbours count as zero magnitude.
    let mag_at = |r: isize, c: isize| -> i64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0
        } else {
            mag2[(r * w as isize + c) as usize]
        }
    };
    let mut kept = vec![false; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = (r * w as isize + c) as usize;
            if mag2[i] == 0 {
                continue;
            }
            let (x, y) = (gx[i], gy[i]);
            let (ax, ay) = (i64::from(x.abs()), i64::from(y.abs()));
            let ((r1, c1), (r2, c2)) = if ay * 10_000 <= ax * 4_142 {
                ((r, c - 1), (r, c + 1))
            } else if ay * 10_000 >= ax * 24_142 {
                ((r - 1, c), (r + 1, c))
            } else if (x > 0) == (y > 0) {
                ((r - 1, c - 1), (r + 1, c + 1))
            } else {
                ((r - 1, c + 1), (r + 1, c - 1))
            };
            kept[i] = mag2[i] >= mag_at(r1, c1) && mag2[i] >= mag_at(r2, c2);
        }
    }

    // Hysteresis: breadth-first growth from strong pixels through weak ones.
    let mut state = vec![0u8; h * w]; // 0 = out, 1 = weak candidate, 2 = edge
    let mut stack = Vec::new();
    for i in 0..h * w {
        if !kept[i] {
            continue;
        }
        let m = mag2[i] as f64;
        if m >= high2 {
            state[i] = 2;
            stack.push(i);
        } else if m >= low2 {
            state[i] = 1;
        }
    }
    while let Some(i) = stack.pop() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = (nr * w as isize + nc) as usize;
                if state[j] == 1 {
                    state[j] = 2;
                    stack.push(j);
                }
            }
        }
    }
    state.iter().map(|&s| u8::from(s == 2)).collect()
}

/// Separable 5x5 binomial blur with replicate padding; output carries a x256
/// numerator so everything stays integral.
fn blur5_replicate(field: &[i32], h: usize, w: usize) -> Vec<i32> {
    const K: [i32; 5] = [1, 4, 6, 4, 1];
    let mut tmp = vec![0i32; h * w];
    for r in 0..h {
        for c in 0..w as isize {
            let mut acc = 0i32;
            for (t, &kv) in K.iter().enumerate() {
                let cc = (c + t as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += kv * field[r * w + cc];
            }
            tmp[r * w + c as usize] = acc;
        }
    }
    let mut out = vec![0i32; h * w];
    for r in 0..h as isize {
        for c in 0..w {
            let mut acc = 0i32;
            for (t, &kv) in K.iter().enumerate() {
                let rr = (r + t as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[rr * w + c];
            }
            out[r as usize * w + c] = acc;
        }
    }
    out
}

/// Same replicate-padded 3x3 convolution, but over an i32 field.
fn conv3_replicate_i32(field: &[i32], h: usize, w: usize, k: &[[i32; 3]; 3]) -> Vec<i32> {
    let at = |r: isize, c: isize| -> i32 {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        field[r * w + c]
    };
    let mut out = vec![0i32; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0i32;
            for (dr, row) in k.iter().enumerate() {
                for (dc, &kv) in row.iter().enumerate() {
                    if kv != 0 {
                        acc += kv * at(r + dr as isize - 1, c + dc as isize - 1);
                    }
                }
            }
            out[(r * w as isize + c) as usize] = acc;
        }
    }
    out
}

/// Binary dilation by a (2r+1)x(2r+1) square, as two separable OR passes.
fn dilate_chebyshev(bits: &[u8], h: usize, w: usize, radius: usize) -> Vec<u8> {
    let r = radius as isize;
    let mut tmp = vec![0u8; h * w];
    for row in 0..h {
        for c in 0..w as isize {
            let lo = (c - r).max(0) as usize;
            let hi = (c + r).min(w as isize - 1) as usize;
            tmp[row * w + c as usize] = u8::from(bits[row * w + lo..=row * w + hi].iter().any(|&b| b == 1));
        }
    }
    let mut out = vec![0u8; h * w];
    for row in 0..h as isize {
        for c in 0..w {
            let lo = (row - r).max(0) as usize;
            let hi = (row + r).min(h as isize - 1) as usize;
            let any = (lo..=hi).any(|rr| tmp[rr * w + c] == 1);
            out[row as usize * w + c] = u8::from(any);
        }
    }
    out
}
