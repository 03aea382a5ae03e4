//! Edge information injection: the edge feature is passed through channel
//! attention then spatial attention, and the attended result is concatenated
//! with the decoder feature and mixed back to the decoder width by a 1x1
//! convolution.
//!
//! Both attention stacks are bias-free on purpose: a zero edge feature then
//! yields an exactly-zero injected signal, so the decoder path is untouched
//! when there is nothing to inject.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::scalar::Scalar;

pub struct Eii {
    ca_reduce: Linear,
    ca_expand: Linear,
    sa_conv: Conv2d,
    mix: Conv2d,
}

impl Eii {
    /// `name` scopes the parameters (one injector per decoder block);
    /// `cd` is the decoder width at that block, `ce` the edge width and
    /// `ratio` the channel-attention bottleneck divisor (floored at 1).
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        name: &str,
        cd: usize,
        ce: usize,
        ratio: usize,
    ) -> Self {
        let hidden = (ce / ratio).max(1);
        Eii {
            ca_reduce: Linear::new(store, rng, &format!("{name}.ca.reduce"), ce, hidden, false),
            ca_expand: Linear::new(store, rng, &format!("{name}.ca.expand"), hidden, ce, false),
            sa_conv: Conv2d::new(store, rng, &format!("{name}.sa.conv"), 2, 1, 7, 1, 3, false),
            mix: Conv2d::new(store, rng, &format!("{name}.mix"), cd + ce, cd, 1, 1, 0, true),
        }
    }

    /// Attention pipeline alone: resize `f_e` to `(hd, wd)`, apply channel
    /// then spatial attention. Returns `(f_csa, channel_weights,
    /// spatial_weights)`; the weights are exposed for inspection.
    pub fn attend<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        f_e: Var,
        hd: usize,
        wd: usize,
    ) -> (Var, Var, Var) {
        let f_e = tape.bilinear(f_e, hd, wd);
        // Channel attention: bottleneck MLP shared between the averaged and
        // maxed channel descriptors, summed, squashed.
        let mlp = |ps: &mut ParamStore<S>, tape: &mut Tape<S>, v: Var| {
            let z = self.ca_reduce.forward(ps, tape, v);
            let z = tape.relu(z);
            self.ca_expand.forward(ps, tape, z)
        };
        let avg = tape.global_avg_pool(f_e);
        let mx = tape.global_max_pool(f_e);
        let za = mlp(ps, tape, avg);
        let zm = mlp(ps, tape, mx);
        let zsum = tape.add(za, zm);
        let w_ca = tape.sigmoid(zsum);
        let f_ca = tape.scale_channels(f_e, w_ca);
        // Spatial attention over the channel-aggregated maps.
        let mean_map = tape.channel_mean(f_ca);
        let max_map = tape.channel_max(f_ca);
        let stacked = tape.concat1(&[mean_map, max_map]);
        let sa_logits = self.sa_conv.forward(ps, tape, stacked);
        let w_sa = tape.sigmoid(sa_logits);
        let f_csa = tape.scale_spatial(f_ca, w_sa);
        (f_csa, w_ca, w_sa)
    }

    /// Full injection: attended edge feature concatenated with the decoder
    /// feature and mixed back to the decoder width.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        decoder_feat: Var,
        f_e: Var,
    ) -> Var {
        let (_, _, hd, wd) = tape.value(decoder_feat).dims4();
        let (f_csa, _, _) = self.attend(ps, tape, f_e, hd, wd);
        let cat = tape.concat1(&[decoder_feat, f_csa]);
        self.mix.forward(ps, tape, cat)
    }
}
