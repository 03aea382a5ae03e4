//! Mutual-information penalty over decoupled feature pairs.
//!
//! Each pyramid level contributes `sigmoid(I_hat)` where `I_hat` is the
//! Donsker–Varadhan estimate `mean(T(joint)) - log mean exp(T(marginal))`
//! produced by a small fully connected statistic network. Joint rows pair a
//! sample's summary of `s` with its own summary of `u`; marginal rows re-pair
//! `u` by a derangement so no row keeps its partner.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EppsError, Result};
use crate::nn::{Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of pyramid levels contributing to the penalty.
pub const MINE_LEVELS: usize = 4;

/// How the penalty trains the statistic networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MineMode {
    /// Everything, statistic networks included, minimizes the penalty.
    JointMin,
    /// Statistic networks climb the estimate while features descend it,
    /// via a detached-copy construction.
    Adversarial,
}

impl fmt::Display for MineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MineMode::JointMin => "joint_min",
            MineMode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for MineMode {
    type Err = EppsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "joint_min" => Ok(MineMode::JointMin),
            "adversarial" => Ok(MineMode::Adversarial),
            other => Err(EppsError::config(format!(
                "unknown mine mode {other:?}; expected joint_min or adversarial"
            ))),
        }
    }
}

/// Paired and re-paired feature rows for one level.
#[derive(Clone, Debug)]
pub struct MineBatch<S> {
    /// `[B, 2D]`; row k is `[s_k || u_k]`.
    pub joint: Tensor<S>,
    /// `[B, 2D]`; row k is `[s_k || u_{perm(k)}]` with `perm(k) != k`.
    pub marginal: Tensor<S>,
    /// Pyramid level index, 0-based.
    pub level: usize,
}

/// A permutation of `0..b` with no fixed points, drawn from `rng`.
///
/// A uniform shuffle is repaired by one forward pass: any fixed point swaps
/// with its right neighbour (wrapping), which cannot create a new fixed point
/// because a permutation is injective. `b = 1` has no derangement.
pub fn derangement<R: Rng + ?Sized>(rng: &mut R, b: usize) -> Result<Vec<usize>> {
    if b < 2 {
        return Err(EppsError::InsufficientBatch { got: b });
    }
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    for k in 0..b {
        if perm[k] == k {
            perm.swap(k, (k + 1) % b);
        }
    }
    debug_assert!(perm.iter().enumerate().all(|(k, &p)| p != k));
    Ok(perm)
}

/// Pools each channel to a 4x4 grid and flattens: `[B,C,H,W] -> [B, 16C]`.
/// At 4x4 input this is exactly a flatten.
pub fn reduce_features_graph<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let (b, c, _, _) = tape
        .value(x)
        .dims4();
    let pooled = tape.adaptive_avg_pool(x, 4, 4);
    tape.reshape(pooled, vec![b, c * 16])
}

/// Value-level [`reduce_features_graph`].
pub fn reduce_features<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = reduce_features_graph(&mut tape, v);
    tape.value(out).clone()
}

/// Builds the joint and marginal row matrices from reduced `[B, D]` features
/// and an explicit permutation.
pub fn make_pairs_graph<S: Scalar>(
    tape: &mut Tape<S>,
    s_reduced: Var,
    u_reduced: Var,
    perm: &[usize],
) -> (Var, Var) {
    let joint = tape.concat1(&[s_reduced, u_reduced]);
    let u_perm = tape.gather_rows(u_reduced, perm.to_vec());
    let marginal = tape.concat1(&[s_reduced, u_perm]);
    (joint, marginal)
}

/// Pairs already-reduced `[B, D]` vectors, drawing the derangement from `rng`.
pub fn make_pairs_from_vectors<S: Scalar>(
    s: &Tensor<S>,
    u: &Tensor<S>,
    level: usize,
    rng: &mut impl Rng,
) -> Result<MineBatch<S>> {
    if s.shape() != u.shape() || s.shape().len() != 2 {
        return Err(EppsError::shape(format!(
            "pairing expects matching [B, D] tensors, got {:?} and {:?}",
            s.shape(),
            u.shape()
        )));
    }
    let b = s.shape()[0];
    let perm = derangement(rng, b)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let uv = tape.constant(u.clone());
    let (joint, marginal) = make_pairs_graph(&mut tape, sv, uv, &perm);
    Ok(MineBatch {
        joint: tape.value(joint).clone(),
        marginal: tape.value(marginal).clone(),
        level,
    })
}

/// Reduces `[B,C,H,W]` features and pairs them; see [`make_pairs_from_vectors`].
pub fn make_pairs<S: Scalar>(
    s: &Tensor<S>,
    u: &Tensor<S>,
    level: usize,
    rng: &mut impl Rng,
) -> Result<MineBatch<S>> {
    if s.shape() != u.shape() || s.shape().len() != 4 {
        return Err(EppsError::shape(format!(
            "pairing expects matching [B,C,H,W] tensors, got {:?} and {:?}",
            s.shape(),
            u.shape()
        )));
    }
    make_pairs_from_vectors(&reduce_features(s), &reduce_features(u), level, rng)
}

/// Three fully connected layers `2D -> hidden -> hidden -> 1` with ReLU
/// between them; scores one row of a pairing.
pub struct StatisticNetwork {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
}

impl StatisticNetwork {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn rand::RngCore,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        StatisticNetwork {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, hidden, true),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), hidden, 1, true),
        }
    }

    /// `[B, 2D] -> [B]` statistic values.
    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, tape: &mut Tape<S>, x: Var) -> Var {
        let b = tape.shape(x)[0];
        let h1 = self.fc1.forward(ps, tape, x);
        let a1 = tape.relu(h1);
        let h2 = self.fc2.forward(ps, tape, a1);
        let a2 = tape.relu(h2);
        let out = self.fc3.forward(ps, tape, a2);
        tape.reshape(out, vec![b])
    }
}

/// `mean(t_joint) - log mean exp(t_marginal)`, max-shifted for stability.
/// Pure arithmetic twin of the graph estimator, for oracle checks.
pub fn estimate_from_statistics(t_joint: &[f64], t_marginal: &[f64]) -> f64 {
    assert!(!t_joint.is_empty() && !t_marginal.is_empty());
    let mean_j: f64 = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    let max_m = t_marginal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = t_marginal.iter().map(|&t| (t - max_m).exp()).sum();
    mean_j - (max_m + (sum_exp / t_marginal.len() as f64).ln())
}

/// Graph estimator: statistic network applied to both row matrices.
pub fn mine_estimate_graph<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamStore<S>,
    net: &StatisticNetwork,
    joint: Var,
    marginal: Var,
) -> Var {
    let t_joint = net.forward(ps, tape, joint);
    let t_marginal = net.forward(ps, tape, marginal);
    let mean_j = tape.mean_all(t_joint);
    let lme = tape.log_mean_exp(t_marginal);
    tape.sub(mean_j, lme)
}

/// Value-level estimate of a prepared batch.
pub fn mine_estimate<S: Scalar>(
    ps: &ParamStore<S>,
    net: &StatisticNetwork,
    batch: &MineBatch<S>,
) -> f64 {
    let mut tape = Tape::new();
    let j = tape.constant(batch.joint.clone());
    let m = tape.constant(batch.marginal.clone());
    let est = mine_estimate_graph(&mut tape, ps, net, j, m);
    tape.value(est).item().cast_f64()
}

/// `sum(sigmoid(estimate))` over levels; strictly inside `(0, n)`.
pub fn mi_loss_from_estimates(estimates: &[f64]) -> f64 {
    estimates.iter().map(|&e| 1.0 / (1.0 + (-e).exp())).sum()
}

/// Graph nodes of the penalty: the reported value, the term the optimizer
/// should descend, and the per-level estimates.
pub struct MiLossVars {
    /// `sum(sigmoid(I_hat))` over levels — the reported penalty.
    pub value: Var,
    /// What gradient descent should minimize. Equal to `value` in
    /// [`MineMode::JointMin`]; in [`MineMode::Adversarial`] it adds
    /// `-I_hat` terms evaluated on detached features, so the statistic
    /// networks ascend the estimate while features still descend it.
    pub train: Var,
    /// One `I_hat` node per level.
    pub estimates: Vec<Var>,
}

/// Builds the full penalty over `(s, u)` feature pairs (unreduced, `[B,C,H,W]`),
/// with one permutation per level.
pub fn mi_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    ps: &ParamStore<S>,
    nets: &[StatisticNetwork],
    pairs: &[(Var, Var)],
    perms: &[Vec<usize>],
    mode: MineMode,
) -> MiLossVars {
    assert_eq!(nets.len(), pairs.len());
    assert_eq!(perms.len(), pairs.len());
    let mut estimates = Vec::with_capacity(pairs.len());
    let mut value: Option<Var> = None;
    let mut adversarial_extra: Option<Var> = None;

    for ((net, &(s, u)), perm) in nets.iter().zip(pairs).zip(perms) {
        let s_red = reduce_features_graph(tape, s);
        let u_red = reduce_features_graph(tape, u);
        let (joint, marginal) = make_pairs_graph(tape, s_red, u_red, perm);
        let est = mine_estimate_graph(tape, ps, net, joint, marginal);
        estimates.push(est);
        let sig = tape.sigmoid(est);
        value = Some(match value {
            Some(acc) => tape.add(acc, sig),
            None => sig,
        });

        if mode == MineMode::Adversarial {
            // Same rows, detached from the feature graph: gradients reach
            // only the statistic network, with a net coefficient of
            // (sigmoid' - 1) < 0, so the network climbs the estimate.
            let s_det = {
                let v = tape.value(s_red).clone();
                tape.constant(v)
            };
            let u_det = {
                let v = tape.value(u_red).clone();
                tape.constant(v)
            };
            let (joint_d, marginal_d) = make_pairs_graph(tape, s_det, u_det, perm);
            let est_d = mine_estimate_graph(tape, ps, net, joint_d, marginal_d);
            let neg = tape.scale(est_d, S::cast(-1.0));
            adversarial_extra = Some(match adversarial_extra {
                Some(acc) => tape.add(acc, neg),
                None => neg,
            });
        }
    }

    let value = value.expect("at least one level");
    let train = match adversarial_extra {
        Some(extra) => tape.add(value, extra),
        None => value,
    };
    MiLossVars {
        value,
        train,
        estimates,
    }
}

/// Value-level penalty over unreduced feature pairs.
pub fn mi_loss<S: Scalar>(
    ps: &ParamStore<S>,
    nets: &[StatisticNetwork],
    pairs: &[(Tensor<S>, Tensor<S>)],
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut estimates = Vec::with_capacity(pairs.len());
    for (level, ((net, (s, u)), _) ) in nets.iter().zip(pairs).zip(0..).enumerate() {
        let batch = make_pairs(s, u, level, rng)?;
        estimates.push(mine_estimate(ps, net, &batch));
    }
    Ok(mi_loss_from_estimates(&estimates))
}
