//! Final fusion: the four decoder features are brought to the finest decoder
//! resolution and a common width, fused by a 1x1 convolution, and re-anchored
//! on the finest feature through a residual add before the single-channel
//! mask head. The fusion convolution is bias-free so that zeroing it really
//! does reduce the module to the finest-feature path.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::nn::{Conv2d, ParamStore};
use crate::scalar::Scalar;

pub struct Ffm {
    projections: [Conv2d; 4],
    fuse: Conv2d,
    head: Conv2d,
}

impl Ffm {
    /// `widths` are the decoder output widths (coarsest first); `cf` the
    /// common fusion width.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        widths: [usize; 4],
        cf: usize,
    ) -> Self {
        let projections = std::array::from_fn(|i| {
            Conv2d::new(store, rng, &format!("ffm.proj{}", i + 1), widths[i], cf, 1, 1, 0, true)
        });
        Ffm {
            projections,
            fuse: Conv2d::new(store, rng, "ffm.fuse", 4 * cf, cf, 1, 1, 0, false),
            head: Conv2d::new(store, rng, "ffm.head", cf, 1, 1, 1, 0, true),
        }
    }

    /// `feats` are the decoder outputs (coarsest to finest); the result is
    /// mask logits at `(out_h, out_w)`.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        feats: &[Var; 4],
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let (_, _, fh, fw) = tape.value(feats[3]).dims4();
        let projected: Vec<Var> = feats
            .iter()
            .zip(&self.projections)
            .map(|(&f, proj)| {
                let f = tape.bilinear(f, fh, fw);
                proj.forward(ps, tape, f)
            })
            .collect();
        let cat = tape.concat1(&projected);
        let fused = self.fuse.forward(ps, tape, cat);
        let resid = tape.add(fused, projected[3]);
        let logits = self.head.forward(ps, tape, resid);
        tape.bilinear(logits, out_h, out_w)
    }
}
