//! Network building blocks: a named parameter store plus the conv / batch
//! norm / linear layers the model is assembled from.
//!
//! Layers own no tensors themselves — construction allocates entries in a
//! [`ParamStore`] and the layer keeps the ids. That keeps the model a plain
//! description of topology, makes checkpointing a store dump, and lets the
//! optimizer walk every parameter without knowing the architecture.

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn key(self) -> usize {
        self.0
    }
}

pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Updated by the optimizer; running statistics and similar state are
    /// stored here too but with `trainable = false`.
    pub trainable: bool,
}

pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) {
        assert_eq!(
            value.shape(),
            self.entries[id.0].value.shape(),
            "parameter {} shape change",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Register a parameter as a graph leaf and track it so its gradient can
    /// be collected after backward. Cheap: storage is shared, not copied.
    /// A parameter used several times on one tape gets a single leaf, so its
    /// gradient accumulates in one place.
    pub fn leaf(&self, tape: &mut Tape<S>, id: ParamId) -> Var {
        if let Some(var) = tape.find_tracked(id.0) {
            return var;
        }
        let var = tape.leaf(self.entries[id.0].value.clone(), true);
        tape.track(id.0, var);
        var
    }

    /// Total number of scalar elements across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// He-style normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<S: Scalar>(rng: &mut dyn RngCore, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Tensor::from_fn(shape, |_| S::cast(dist.sample(rng)))
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(rng, vec![out_ch, in_ch, k, k], in_ch * k * k),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]), true));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, tape: &mut Tape<S>, x: Var) -> Var {
        let w = ps.leaf(tape, self.weight);
        let b = self.bias.map(|id| ps.leaf(tape, id));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], S::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], S::one()),
                false,
            ),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        x: Var,
        training: bool,
    ) -> Var {
        let gamma = ps.leaf(tape, self.gamma);
        let beta = ps.leaf(tape, self.beta);
        let eps = S::cast(self.eps);
        if training {
            let (bsz, _, h, w) = tape.value(x).dims4();
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps);
            // Track running statistics with the unbiased variance estimate.
            let n = bsz * h * w;
            let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let mom = S::cast(self.momentum);
            let keep = S::one() - mom;
            let corr = S::cast(correction);
            let new_mean = ps
                .get(self.running_mean)
                .zip_map(&mean, |old, m| keep * old + mom * m);
            let new_var = ps
                .get(self.running_var)
                .zip_map(&var, |old, v| keep * old + mom * v * corr);
            ps.set(self.running_mean, new_mean);
            ps.set(self.running_var, new_var);
            y
        } else {
            let mean = ps.get(self.running_mean).clone();
            let var = ps.get(self.running_var).clone();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}

/// Conv -> BatchNorm -> ReLU, the repeated unit of the whole network.
pub struct Cbr {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Cbr {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let pad = k / 2;
        Cbr {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, k, stride, pad, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        tape: &mut Tape<S>,
        x: Var,
        training: bool,
    ) -> Var {
        let x = self.conv.forward(ps, tape, x);
        let x = self.bn.forward(ps, tape, x, training);
        tape.relu(x)
    }
}

pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut dyn RngCore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                he_normal(rng, vec![out_dim, in_dim], in_dim),
                true,
            ),
            bias: bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), true)),
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, tape: &mut Tape<S>, x: Var) -> Var {
        let w = ps.leaf(tape, self.weight);
        let b = self.bias.map(|id| ps.leaf(tape, id));
        tape.linear(x, w, b)
    }
}
