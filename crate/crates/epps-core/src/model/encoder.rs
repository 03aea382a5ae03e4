//! Backbone encoders producing the four-level feature pyramid.
//!
//! Both variants emit features at strides 4/8/16/32 of the input. The
//! `resnet50` backbone is the standard 50-layer bottleneck residual network
//! (stages of 3/4/6/3 blocks, channel widths 256/512/1024/2048); `tiny` is a
//! plain stack of stride-2 CBR blocks with widths 16/32/64/128, small enough
//! for fast tests and CPU training.

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::nn::{BatchNorm2d, Cbr, Conv2d, ParamStore};
use crate::scalar::Scalar;

use super::Backbone;

/// One residual bottleneck: 1x1 reduce, 3x3 (carries the stride), 1x1 expand,
/// with a projection shortcut whenever the shape changes.
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        name: &str,
        in_ch: usize,
        width: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, width, 1, 1, 0, false);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), width);
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), width, width, 3, stride, 1, false);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), width);
        let conv3 = Conv2d::new(store, rng, &format!("{name}.conv3"), width, out_ch, 1, 1, 0, false);
        let bn3 = BatchNorm2d::new(store, &format!("{name}.bn3"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(store, rng, &format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, false),
                BatchNorm2d::new(store, &format!("{name}.down.bn"), out_ch),
            )
        });
        Bottleneck {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            shortcut,
        }
    }

    fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        x: Var,
        training: bool,
    ) -> Var {
        let y = self.conv1.forward(ps, tape, x);
        let y = self.bn1.forward(ps, tape, y, training);
        let y = tape.relu(y);
        let y = self.conv2.forward(ps, tape, y);
        let y = self.bn2.forward(ps, tape, y, training);
        let y = tape.relu(y);
        let y = self.conv3.forward(ps, tape, y);
        let y = self.bn3.forward(ps, tape, y, training);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ps, tape, x);
                bn.forward(ps, tape, s, training)
            }
            None => x,
        };
        let sum = tape.add(y, skip);
        tape.relu(sum)
    }
}

enum EncoderBody {
    Resnet50 {
        stem_conv: Conv2d,
        stem_bn: BatchNorm2d,
        stages: [Vec<Bottleneck>; 4],
    },
    Tiny {
        stem: [Cbr; 2],
        stages: [Cbr; 3],
    },
}

pub struct Encoder {
    body: EncoderBody,
}

impl Encoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut dyn RngCore, backbone: Backbone) -> Self {
        let body = match backbone {
            Backbone::Resnet50 => {
                let stem_conv = Conv2d::new(store, rng, "encoder.stem.conv", 3, 64, 7, 2, 3, false);
                let stem_bn = BatchNorm2d::new(store, "encoder.stem.bn", 64);
                let depths = [3usize, 4, 6, 3];
                let widths = [64usize, 128, 256, 512];
                let mut in_ch = 64usize;
                let stages = std::array::from_fn(|si| {
                    let out_ch = widths[si] * 4;
                    let blocks = (0..depths[si])
                        .map(|bi| {
                            // Stage 1 keeps stride 4 from the stem; later stages
                            // halve on their first block.
                            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                            let block = Bottleneck::new(
                                store,
                                rng,
                                &format!("encoder.stage{}.block{}", si + 1, bi),
                                in_ch,
                                widths[si],
                                out_ch,
                                stride,
                            );
                            in_ch = out_ch;
                            block
                        })
                        .collect();
                    blocks
                });
                EncoderBody::Resnet50 {
                    stem_conv,
                    stem_bn,
                    stages,
                }
            }
            Backbone::Tiny => {
                let c = backbone.pyramid_channels();
                EncoderBody::Tiny {
                    stem: [
                        Cbr::new(store, rng, "encoder.stem0", 3, c[0], 3, 2),
                        Cbr::new(store, rng, "encoder.stem1", c[0], c[0], 3, 2),
                    ],
                    stages: [
                        Cbr::new(store, rng, "encoder.stage2", c[0], c[1], 3, 2),
                        Cbr::new(store, rng, "encoder.stage3", c[1], c[2], 3, 2),
                        Cbr::new(store, rng, "encoder.stage4", c[2], c[3], 3, 2),
                    ],
                }
            }
        };
        Encoder { body }
    }

    /// Returns the pyramid `[f1, f2, f3, f4]` at strides 4/8/16/32.
    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        image: Var,
        training: bool,
    ) -> [Var; 4] {
        match &self.body {
            EncoderBody::Resnet50 {
                stem_conv,
                stem_bn,
                stages,
            } => {
                let x = stem_conv.forward(ps, tape, image);
                let x = stem_bn.forward(ps, tape, x, training);
                let x = tape.relu(x);
                let mut x = tape.max_pool(x, 3, 2, 1);
                let mut pyramid = [x; 4];
                for (si, stage) in stages.iter().enumerate() {
                    for block in stage {
                        x = block.forward(ps, tape, x, training);
                    }
                    pyramid[si] = x;
                }
                pyramid
            }
            EncoderBody::Tiny { stem, stages } => {
                let x = stem[0].forward(ps, tape, image, training);
                let f1 = stem[1].forward(ps, tape, x, training);
                let f2 = stages[0].forward(ps, tape, f1, training);
                let f3 = stages[1].forward(ps, tape, f2, training);
                let f4 = stages[2].forward(ps, tape, f3, training);
                [f1, f2, f3, f4]
            }
        }
    }
}
