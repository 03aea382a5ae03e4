//! Segmentation losses: soft Dice, clamped BCE, their sum on logits, and the
//! weighted joint objective.
//!
//! Every loss is first defined as a tape-graph builder (used verbatim by
//! the training loop, so gradients flow through exactly what is reported)
//! and then wrapped for plain-tensor evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EppsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing constant in the soft Dice ratio; keeps empty-empty pairs at
/// coefficient 1.
pub const DICE_SMOOTH: f64 = 1.0;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log,
/// so a maximally wrong pixel costs `-ln(BCE_CLAMP)` ≈ 16.118.
pub const BCE_CLAMP: f64 = 1e-7;

/// All loss components of one step, with the weights that combined them.
///
/// `loss_joint` is `loss_mask + (alpha * loss_edge + beta * loss_mi)` in that
/// association, evaluated in the model's precision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss_mask: f64,
    pub loss_edge: f64,
    pub loss_mi: f64,
    pub loss_joint: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBundle {
    /// Combines already-computed components with the weighted sum.
    pub fn compose(loss_mask: f64, loss_edge: f64, loss_mi: f64, alpha: f64, beta: f64) -> Self {
        LossBundle {
            loss_mask,
            loss_edge,
            loss_mi,
            loss_joint: loss_mask + (alpha * loss_edge + beta * loss_mi),
            alpha,
            beta,
        }
    }

    /// Component name/value pairs, for finiteness checks and logging.
    pub fn components(&self) -> [(&'static str, f64); 4] {
        [
            ("loss_mask", self.loss_mask),
            ("loss_edge", self.loss_edge),
            ("loss_mi", self.loss_mi),
            ("loss_joint", self.loss_joint),
        ]
    }
}

/// Validates that `alpha` and `beta` are finite and non-negative.
pub fn validate_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 || beta < 0.0 {
        return Err(EppsError::config(format!(
            "loss weights must be finite and non-negative, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

/// Soft Dice loss on probabilities: per-sample coefficient
/// `(2 Σ p·g + 1) / (Σ p + Σ g + 1)`, batch-averaged, returned as
/// `1 - mean coefficient`.
pub fn dice_loss_graph<S: Scalar>(tape: &mut Tape<S>, probs: Var, gt: Var) -> Var {
    let smooth = S::cast(DICE_SMOOTH);
    let prod = tape.mul(probs, gt);
    let inter = tape.sum_per_sample(prod);
    let num_scaled = tape.scale(inter, S::cast(2.0));
    let num = tape.add_const(num_scaled, smooth);
    let p_sum = tape.sum_per_sample(probs);
    let g_sum = tape.sum_per_sample(gt);
    let sums = tape.add(p_sum, g_sum);
    let den = tape.add_const(sums, smooth);
    let dsc = tape.div(num, den);
    let mean = tape.mean_all(dsc);
    let neg = tape.scale(mean, S::cast(-1.0));
    tape.add_const(neg, S::one())
}

/// Binary cross-entropy on probabilities, mean over every pixel, with the
/// probabilities clamped away from 0 and 1.
pub fn bce_loss_graph<S: Scalar>(tape: &mut Tape<S>, probs: Var, gt: Var) -> Var {
    let lo = S::cast(BCE_CLAMP);
    let hi = S::cast(1.0 - BCE_CLAMP);
    let p = tape.clamp(probs, lo, hi);
    let ln_p = tape.ln(p);
    let pos = tape.mul(gt, ln_p);
    let neg_p = tape.scale(p, S::cast(-1.0));
    let one_minus_p = tape.add_const(neg_p, S::one());
    let ln_q = tape.ln(one_minus_p);
    let neg_g = tape.scale(gt, S::cast(-1.0));
    let one_minus_g = tape.add_const(neg_g, S::one());
    let negt = tape.mul(one_minus_g, ln_q);
    let sum = tape.add(pos, negt);
    let mean = tape.mean_all(sum);
    tape.scale(mean, S::cast(-1.0))
}

/// DiceBCE on logits: sigmoid, then Dice loss plus BCE.
pub fn dice_bce_graph<S: Scalar>(tape: &mut Tape<S>, logits: Var, gt: Var) -> Var {
    let probs = tape.sigmoid(logits);
    let dice = dice_loss_graph(tape, probs, gt);
    let bce = bce_loss_graph(tape, probs, gt);
    tape.add(dice, bce)
}

/// The joint objective's graph nodes, one per reported component.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub loss_mask: Var,
    pub loss_edge: Var,
    pub loss_mi: Var,
    pub loss_joint: Var,
}

/// Combines already-built component losses into
/// `loss_mask + (alpha * loss_edge + beta * loss_mi)`.
///
/// Callers that lack an edge branch or MI penalty pass a scalar zero
/// constant for the missing term; the composition stays a single graph so
/// every configuration backprops through the same arithmetic.
pub fn compose_joint_graph<S: Scalar>(
    tape: &mut Tape<S>,
    loss_mask: Var,
    loss_edge: Var,
    loss_mi: Var,
    alpha: f64,
    beta: f64,
) -> Result<JointVars> {
    validate_weights(alpha, beta)?;
    let edge_term = tape.scale(loss_edge, S::cast(alpha));
    let mi_term = tape.scale(loss_mi, S::cast(beta));
    let weighted = tape.add(edge_term, mi_term);
    let loss_joint = tape.add(loss_mask, weighted);
    Ok(JointVars {
        loss_mask,
        loss_edge,
        loss_mi,
        loss_joint,
    })
}

/// Builds `loss_mask + (alpha * loss_edge + beta * loss_mi)` where the mask
/// and edge terms are DiceBCE on their logits.
pub fn joint_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    mask_logits: Var,
    mask_gt: Var,
    edge_logits: Var,
    edge_gt: Var,
    loss_mi: Var,
    alpha: f64,
    beta: f64,
) -> Result<JointVars> {
    let loss_mask = dice_bce_graph(tape, mask_logits, mask_gt);
    let loss_edge = dice_bce_graph(tape, edge_logits, edge_gt);
    compose_joint_graph(tape, loss_mask, loss_edge, loss_mi, alpha, beta)
}

impl JointVars {
    /// Reads the component values off the tape into a bundle.
    pub fn bundle<S: Scalar>(&self, tape: &Tape<S>, alpha: f64, beta: f64) -> LossBundle {
        LossBundle {
            loss_mask: tape.value(self.loss_mask).item().cast_f64(),
            loss_edge: tape.value(self.loss_edge).item().cast_f64(),
            loss_mi: tape.value(self.loss_mi).item().cast_f64(),
            loss_joint: tape.value(self.loss_joint).item().cast_f64(),
            alpha,
            beta,
        }
    }
}

fn check_pair<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(EppsError::shape(format!(
            "{what}: shapes {:?} and {:?} do not match",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Tensors of rank 0/1 are treated as a single sample.
fn as_batched<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    if t.shape().len() < 2 {
        t.reshaped(&[1, t.numel()])
    } else {
        t.clone()
    }
}

fn eval_pair_graph<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    build: impl FnOnce(&mut Tape<S>, Var, Var) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let av = tape.constant(as_batched(a));
    let bv = tape.constant(as_batched(b));
    let out = build(&mut tape, av, bv);
    tape.value(out).item().cast_f64()
}

/// Value-level soft Dice loss; see [`dice_loss_graph`].
pub fn dice_loss<S: Scalar>(probs: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    check_pair(probs, gt, "dice_loss")?;
    Ok(eval_pair_graph(probs, gt, dice_loss_graph))
}

/// Value-level BCE; see [`bce_loss_graph`].
pub fn bce_loss<S: Scalar>(probs: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    check_pair(probs, gt, "bce_loss")?;
    Ok(eval_pair_graph(probs, gt, bce_loss_graph))
}

/// Value-level DiceBCE on logits; see [`dice_bce_graph`].
pub fn dice_bce<S: Scalar>(logits: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    check_pair(logits, gt, "dice_bce")?;
    Ok(eval_pair_graph(logits, gt, dice_bce_graph))
}

/// Value-level joint objective over mask and edge logits plus a

/// mutual-information term.
pub fn joint_loss<S: Scalar>(
    mask_logits: &Tensor<S>,
    mask_gt: &Tensor<S>,
    edge_logits: &Tensor<S>,
    edge_gt: &Tensor<S>,
    loss_mi: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBundle> {
    validate_weights(alpha, beta)?;
    check_pair(mask_logits, mask_gt, "joint_loss (mask)")?;
    check_pair(edge_logits, edge_gt, "joint_loss (edge)")?;
    let loss_mask = dice_bce(mask_logits, mask_gt)?;
    let loss_edge = dice_bce(edge_logits, edge_gt)?;
    Ok(LossBundle::compose(
        loss_mask, loss_edge, loss_mi, alpha, beta,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(data: Vec<f64>) -> Tensor<f64> {
        let n = data.len();
        Tensor::new(vec![1, 1, 1, n], data)
    }

    #[test]
    fn dice_hand_cases() {
        assert!((dice_loss(&t(vec![1.0; 4]), &t(vec![1.0; 4])).unwrap()).abs() < 1e-12);
        let loss = dice_loss(&t(vec![0.0; 4]), &t(vec![1.0; 4])).unwrap();
        assert!((loss - 0.8).abs() < 1e-12, "got {loss}");
        let loss = dice_loss(&t(vec![1.0, 1.0, 0.0, 0.0]), &t(vec![0.0, 1.0, 1.0, 0.0])).unwrap();
        assert!((loss - 0.4).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn dice_averages_per_sample_coefficients() {
        // Two samples: a perfect one and the 0.6-coefficient one.
        let probs = Tensor::new(
            vec![2, 1, 2, 2],
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        );
        let gt = Tensor::new(
            vec![2, 1, 2, 2],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        );
        let loss = dice_loss(&probs, &gt).unwrap();
        assert!((loss - (1.0 - (1.0 + 0.6) / 2.0)).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn bce_hand_cases() {
        let half = t(vec![0.5; 6]);
        let g = t(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let loss = bce_loss(&half, &g).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "got {loss}");

        let perfect = bce_loss(&g, &g).unwrap();
        assert!(perfect <= 1e-6, "got {perfect}");

        let flipped = g.map(|v| 1.0 - v);
        let ceiling = bce_loss(&flipped, &g).unwrap();
        assert!((ceiling - -(BCE_CLAMP.ln())).abs() < 1e-6, "got {ceiling}");
    }

    #[test]
    fn dice_bce_hand_cases() {
        let g = t(vec![1.0, 0.0, 1.0, 1.0]);
        let strong = g.map(|v| if v == 1.0 { 30.0 } else { -30.0 });
        assert!(dice_bce(&strong, &g).unwrap() <= 1e-5);

        let zeros = t(vec![0.0; 4]);
        let ones = t(vec![1.0; 4]);
        let loss = dice_bce(&zeros, &ones).unwrap();
        // Sigmoid(0) = 0.5: Dice term 1 - 5/7, BCE term ln 2.
        let expected = (1.0 - 5.0 / 7.0) + std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn joint_bundle_arithmetic() {
        let b = LossBundle::compose(0.3, 0.2, 2.0, 1.0, 1.0);
        assert_eq!(b.loss_joint, 2.5);
        let b = LossBundle::compose(0.5, 1.0, 2.0, 0.1, 0.01);
        assert!((b.loss_joint - 0.62).abs() < 1e-12);
        let b = LossBundle::compose(0.7, 9.0, 9.0, 0.0, 0.0);
        assert_eq!(b.loss_joint, 0.7);
        assert_eq!(b.components()[3].0, "loss_joint");
    }

    #[test]
    fn joint_loss_composes_exactly() {
        let mask_logits = t(vec![0.3, -0.2, 1.4, 0.0]);
        let mask_gt = t(vec![1.0, 0.0, 1.0, 0.0]);
        let edge_logits = t(vec![-0.5, 0.8, 0.1, 2.0]);
        let edge_gt = t(vec![0.0, 1.0, 0.0, 1.0]);
        let bundle = joint_loss(&mask_logits, &mask_gt, &edge_logits, &edge_gt, 2.0, 0.5, 0.25)
            .unwrap();
        assert_eq!(
            bundle.loss_joint,
            bundle.loss_mask + (0.5 * bundle.loss_edge + 0.25 * bundle.loss_mi)
        );
        for (_, v) in bundle.components() {
            assert!(v.is_finite() && v >= 0.0);
        }

        assert!(joint_loss(&mask_logits, &mask_gt, &edge_logits, &edge_gt, 0.0, -1.0, 0.0).is_err());
        let short = t(vec![0.0; 3]);
        assert!(joint_loss(&short, &mask_gt, &edge_logits, &edge_gt, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn graph_and_wrapper_agree_with_joint_vars() {
        let mut tape = Tape::new();
        let ml = tape.constant(t(vec![0.3, -0.2, 1.4, 0.0]));
        let mg = tape.constant(t(vec![1.0, 0.0, 1.0, 0.0]));
        let el = tape.constant(t(vec![-0.5, 0.8, 0.1, 2.0]));
        let eg = tape.constant(t(vec![0.0, 1.0, 0.0, 1.0]));
        let mi = tape.constant(Tensor::scalar(2.0));
        let vars = joint_loss_graph(&mut tape, ml, mg, el, eg, mi, 0.5, 0.25).unwrap();
        let bundle = vars.bundle(&tape, 0.5, 0.25);
        let wrapper = joint_loss(
            &t(vec![0.3, -0.2, 1.4, 0.0]),
            &t(vec![1.0, 0.0, 1.0, 0.0]),
            &t(vec![-0.5, 0.8, 0.1, 2.0]),
            &t(vec![0.0, 1.0, 0.0, 1.0]),
            2.0,
            0.5,
            0.25,
        )
        .unwrap();
        assert_eq!(bundle, wrapper);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..4 {
            let gt = Tensor::from_fn(&[2, 1, 4, 4], |_| f64::from(u8::from(rng.random::<bool>())));
            let logits: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();

            let value = |xs: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let l = tape.constant(Tensor::new(vec![2, 1, 4, 4], xs.to_vec()));
                let g = tape.constant(gt.clone());
                let out = dice_bce_graph(&mut tape, l, g);
                tape.value(out).item()
            };

            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(vec![2, 1, 4, 4], logits.clone()), true);
            let g = tape.constant(gt.clone());
            let out = dice_bce_graph(&mut tape, l, g);
            let grads = tape.backward(out);
            let grad = grads.get(l).unwrap().clone();

            let h = 1e-5;
            for i in 0..logits.len() {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                let ad = grad.as_slice()[i];
                assert!(
                    (ad - fd).abs() <= 1e-3 * (1.0 + fd.abs()),
                    "grad mismatch at {i}: ad={ad}, fd={fd}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn dice_stays_in_unit_interval(
            probs in prop::collection::vec(0.0f64..=1.0, 16),
            gt in prop::collection::vec(prop::bool::ANY, 16),
        ) {
            let g = t(gt.iter().map(|&b| f64::from(u8::from(b))).collect());
            let d = dice_loss(&t(probs.clone()), &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let b = bce_loss(&t(probs), &g).unwrap();
            prop_assert!(b >= 0.0);
        }

        #[test]
        fn moving_probs_toward_gt_never_hurts(
            probs in prop::collection::vec(0.001f64..0.999, 16),
            gt in prop::collection::vec(prop::bool::ANY, 16),
            lambda in 0.0f64..=1.0,
        ) {
            let g: Vec<f64> = gt.iter().map(|&b| f64::from(u8::from(b))).collect();
            let moved: Vec<f64> = probs
                .iter()
                .zip(&g)
                .map(|(&p, &gv)| (1.0 - lambda) * p + lambda * gv)
                .collect();
            let before = dice_loss(&t(probs.clone()), &t(g.clone())).unwrap()
                + bce_loss(&t(probs), &t(g.clone())).unwrap();
            let after = dice_loss(&t(moved.clone()), &t(g.clone())).unwrap()
                + bce_loss(&t(moved), &t(g)).unwrap();
            prop_assert!(after <= before + 1e-9, "after={after}, before={before}");
        }
    }
}
