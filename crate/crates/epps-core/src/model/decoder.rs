//! Decoder: four blocks walking back up the pyramid from the coarsest
//! significant feature. Blocks 1-3 upsample 2x, concatenate the skip of the
//! matching resolution and refine with two CBR blocks; block 4 refines the
//! finest feature once more without changing resolution. Each block ends by
//! injecting the edge feature (when the model carries one).

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{EppsError, Result};
use crate::nn::{Cbr, ParamStore};
use crate::scalar::Scalar;

use super::eii::Eii;

struct DecoderBlock {
    refine: [Cbr; 2],
    inject: Option<Eii>,
}

pub struct Decoder {
    blocks: [DecoderBlock; 4],
}

impl Decoder {
    /// `pyramid` and `widths` are the encoder channel table and the decoder
    /// width table (coarsest-handled-first order: widths[0] is the output of
    /// the first block). `ce`/`ratio` configure the injectors; `with_eii`
    /// false builds a plain decoder.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        pyramid: [usize; 4],
        widths: [usize; 4],
        ce: usize,
        ratio: usize,
        with_eii: bool,
    ) -> Self {
        // Input channels per block: up2(s4) + skip s3, then up2(prev) + skip,
        // and finally the finest feature alone.
        let ins = [
            pyramid[3] + pyramid[2],
            widths[0] + pyramid[1],
            widths[1] + pyramid[0],
            widths[2],
        ];
        let blocks = std::array::from_fn(|i| {
            let name = format!("decoder.block{}", i + 1);
            DecoderBlock {
                refine: [
                    Cbr::new(store, rng, &format!("{name}.cbr0"), ins[i], widths[i], 3, 1),
                    Cbr::new(store, rng, &format!("{name}.cbr1"), widths[i], widths[i], 3, 1),
                ],
                inject: with_eii
                    .then(|| Eii::new(store, rng, &format!("{name}.eii"), widths[i], ce, ratio)),
            }
        });
        Decoder { blocks }
    }

    /// `skips` are the significant features s1..s4 in pyramid order; `f_e`
    /// is the edge feature when the model carries one. Returns the four
    /// post-injection decoder features, coarsest to finest.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        skips: &[Var; 4],
        f_e: Option<Var>,
        training: bool,
    ) -> Result<[Var; 4]> {
        for i in 0..3 {
            let (b0, _, h0, w0) = tape.value(skips[i]).dims4();
            let (b1, _, h1, w1) = tape.value(skips[i + 1]).dims4();
            if b0 != b1 || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(EppsError::shape(format!(
                    "decoder skips must halve level to level, got {:?} then {:?}",
                    tape.shape(skips[i]),
                    tape.shape(skips[i + 1])
                )));
            }
        }
        let mut x = skips[3];
        let mut outs = [x; 4];
        for (i, block) in self.blocks.iter().enumerate() {
            if i < 3 {
                let skip = skips[2 - i];
                let (_, _, sh, sw) = tape.value(skip).dims4();
                let up = tape.bilinear(x, sh, sw);
                x = tape.concat1(&[up, skip]);
            }
            x = block.refine[0].forward(ps, tape, x, training);
            x = block.refine[1].forward(ps, tape, x, training);
            if let (Some(eii), Some(fe)) = (&block.inject, f_e) {
                x = eii.forward(ps, tape, x, fe);
            }
            outs[i] = x;
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn skips_for(
        tape: &mut Tape<f32>,
        channels: [usize; 4],
        base: usize,
    ) -> [Var; 4] {
        std::array::from_fn(|i| {
            let side = base >> i;
            tape.constant(Tensor::from_fn(vec![1, channels[i], side, side], |j| {
                (j % 17) as f32 * 0.1 - 0.8
            }))
        })
    }

    #[test]
    fn full_width_channel_schedule() {
        let channels = [256, 512, 1024, 2048];
        let widths = [256, 128, 64, 64];
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&mut store, &mut rng, channels, widths, 64, 16, true);
        let mut tape = Tape::new();
        let skips = skips_for(&mut tape, channels, 16);
        let fe = tape.constant(Tensor::from_fn(vec![1, 64, 16, 16], |i| (i % 3) as f32));
        let outs = dec.forward(&mut store, &mut tape, &skips, Some(fe), false).unwrap();
        assert_eq!(tape.shape(outs[0]), [1, 256, 4, 4]);
        assert_eq!(tape.shape(outs[1]), [1, 128, 8, 8]);
        assert_eq!(tape.shape(outs[2]), [1, 64, 16, 16]);
        assert_eq!(tape.shape(outs[3]), [1, 64, 16, 16]);
    }

    #[test]
    fn tiny_width_finest_feature() {
        let channels = [16, 32, 64, 128];
        let widths = [64, 32, 16, 16];
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = Decoder::new(&mut store, &mut rng, channels, widths, 16, 4, true);
        let mut tape = Tape::new();
        let skips = skips_for(&mut tape, channels, 16);
        let fe = tape.constant(Tensor::from_fn(vec![1, 16, 16, 16], |i| (i % 5) as f32 * 0.2));
        let outs = dec.forward(&mut store, &mut tape, &skips, Some(fe), false).unwrap();
        assert_eq!(tape.shape(outs[3]), [1, 16, 16, 16]);
    }

    #[test]
    fn zero_weights_produce_zero_features() {
        let channels = [4, 8, 12, 16];
        let widths = [8, 6, 4, 4];
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = Decoder::new(&mut store, &mut rng, channels, widths, 4, 2, false);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape));
        }
        let mut tape = Tape::new();
        let skips = skips_for(&mut tape, channels, 8);
        let outs = dec.forward(&mut store, &mut tape, &skips, None, false).unwrap();
        for out in outs {
            assert!(tape.value(out).as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_skip_shapes_are_rejected() {
        let channels = [4, 8, 12, 16];
        let widths = [8, 6, 4, 4];
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = Decoder::new(&mut store, &mut rng, channels, widths, 4, 2, false);
        let mut tape = Tape::new();
        let mut skips = skips_for(&mut tape, channels, 8);
        skips[1] = tape.constant(Tensor::zeros(vec![1, 8, 3, 3]));
        let err = dec.forward(&mut store, &mut tape, &skips, None, false).unwrap_err();
        assert!(matches!(err, EppsError::Shape(_)));
    }
}
