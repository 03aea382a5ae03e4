//! Edge feature extractor operating on the finest encoder level.
//!
//! A small top-down / bottom-up pyramid over `f1`: two rounds of
//! (CBR, 2x2 max pool) going down, then two rounds of (bilinear 2x upsample,
//! concat with the matching top-down feature, CBR) coming back up. The final
//! full-resolution feature `f_e` both feeds the decoder's injection blocks
//! and, through a 1x1 head upsampled 4x, produces edge logits at input
//! resolution.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{EppsError, Result};
use crate::nn::{Cbr, Conv2d, ParamStore};
use crate::scalar::Scalar;

pub struct Eme {
    down1: Cbr,
    down2: Cbr,
    up1: Cbr,
    up2: Cbr,
    edge_head: Conv2d,
}

impl Eme {
    /// `in_ch` is the channel width of `f1`; `ce` the internal edge width.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        in_ch: usize,
        ce: usize,
    ) -> Self {
        Eme {
            down1: Cbr::new(store, rng, "eme.down1", in_ch, ce, 3, 1),
            down2: Cbr::new(store, rng, "eme.down2", ce, ce, 3, 1),
            up1: Cbr::new(store, rng, "eme.up1", 2 * ce, ce, 3, 1),
            up2: Cbr::new(store, rng, "eme.up2", 2 * ce, ce, 3, 1),
            edge_head: Conv2d::new(store, rng, "eme.edge_head", ce, 1, 1, 1, 0, true),
        }
    }

    /// Returns `(f_e, edge_logits)` where `f_e` matches `f1`'s spatial size
    /// and `edge_logits` is upsampled 4x to the original input resolution.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        f1: Var,
        training: bool,
    ) -> Result<(Var, Var)> {
        let (_, _, h, w) = tape.value(f1).dims4();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(EppsError::shape(format!(
                "edge module needs spatial size divisible by 4, got {h}x{w}"
            )));
        }
        // Top-down: features kept at full, half and quarter resolution.
        let t1 = self.down1.forward(ps, tape, f1, training);
        let p1 = tape.max_pool(t1, 2, 2, 0);
        let t2 = self.down2.forward(ps, tape, p1, training);
        let p2 = tape.max_pool(t2, 2, 2, 0);
        // Bottom-up: upsample, fuse along channels with the same-resolution
        // top-down feature, refine.
        let r1 = tape.bilinear(p2, h / 2, w / 2);
        let c1 = tape.concat1(&[r1, t2]);
        let u1 = self.up1.forward(ps, tape, c1, training);
        let r2 = tape.bilinear(u1, h, w);
        let c2 = tape.concat1(&[r2, t1]);
        let f_e = self.up2.forward(ps, tape, c2, training);
        let logits = self.edge_head.forward(ps, tape, f_e);
        let edge_logits = tape.bilinear(logits, 4 * h, 4 * w);
        Ok((f_e, edge_logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(in_ch: usize, ce: usize, h: usize, w: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eme = Eme::new(&mut store, &mut rng, in_ch, ce);
        let mut tape = Tape::new();
        let f1 = tape.constant(Tensor::from_fn(vec![1, in_ch, h, w], |i| (i % 7) as f32 * 0.1));
        let (f_e, edge) = eme.forward(&mut store, &mut tape, f1, false)?;
        Ok((tape.shape(f_e).to_vec(), tape.shape(edge).to_vec()))
    }

    #[test]
    fn full_width_shapes() {
        let (fe, edge) = run(256, 64, 64, 64).unwrap();
        assert_eq!(fe, [1, 64, 64, 64]);
        assert_eq!(edge, [1, 1, 256, 256]);
    }

    #[test]
    fn tiny_shapes() {
        let (fe, edge) = run(16, 16, 16, 16).unwrap();
        assert_eq!(fe, [1, 16, 16, 16]);
        assert_eq!(edge, [1, 1, 64, 64]);
    }

    #[test]
    fn edge_feature_keeps_input_resolution_on_rectangles() {
        let (fe, edge) = run(16, 16, 16, 24).unwrap();
        assert_eq!(fe[2..], [16, 24]);
        assert_eq!(edge[2..], [64, 96]);
    }

    #[test]
    fn indivisible_spatial_size_is_a_shape_error() {
        let err = run(16, 16, 18, 16).unwrap_err();
        assert!(matches!(err, EppsError::Shape(_)), "got {err:?}");
    }
}
