//! The full segmentation network: encoder pyramid, edge branch, per-level
//! feature decoupling, decoder with edge injection, and the fusion head.
//!
//! Two backbone sizes share one topology: `resnet50` matches the reference
//! configuration; `tiny` keeps every connection but shrinks widths so that
//! CPU training and exhaustive testing stay cheap. The `Ablation` switch
//! removes component groups wholesale for comparison runs.

pub mod decoder;
pub mod eii;
pub mod eme;
pub mod encoder;
pub mod ffm;
pub mod sfd;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{EppsError, Result};
use crate::mine::StatisticNetwork;
use crate::nn::{Cbr, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use decoder::Decoder;
use eme::Eme;
use encoder::Encoder;
use ffm::Ffm;
use sfd::Sfd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet50,
    Tiny,
}

impl Backbone {
    pub const ALL: [Backbone; 2] = [Backbone::Resnet50, Backbone::Tiny];

    /// Channel widths of f1..f4.
    pub fn pyramid_channels(self) -> [usize; 4] {
        match self {
            Backbone::Resnet50 => [256, 512, 1024, 2048],
            Backbone::Tiny => [16, 32, 64, 128],
        }
    }

    /// Output widths of the four decoder blocks, coarsest first.
    pub fn decoder_widths(self) -> [usize; 4] {
        match self {
            Backbone::Resnet50 => [256, 128, 64, 64],
            Backbone::Tiny => [64, 32, 16, 16],
        }
    }

    /// Width of the edge feature f_e.
    pub fn edge_width(self) -> usize {
        match self {
            Backbone::Resnet50 => 64,
            Backbone::Tiny => 16,
        }
    }

    /// Common width inside the fusion head.
    pub fn fuse_width(self) -> usize {
        self.edge_width()
    }

    /// Channel-attention bottleneck divisor.
    pub fn attention_ratio(self) -> usize {
        match self {
            Backbone::Resnet50 => 16,
            Backbone::Tiny => 4,
        }
    }

    /// Hidden width of the statistic networks.
    pub fn mine_hidden(self) -> usize {
        match self {
            Backbone::Resnet50 => 256,
            Backbone::Tiny => 64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::Tiny => "tiny",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = EppsError;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| EppsError::config(format!("unknown backbone '{s}' (expected resnet50 or tiny)")))
    }
}

/// Which component groups the model carries. `Baseline` swaps each decoupler
/// for a single channel-preserving CBR and drops the edge branch entirely;
/// the two partial settings restore one group each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    SfdOnly,
    EmeEiiOnly,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Baseline,
        Ablation::SfdOnly,
        Ablation::EmeEiiOnly,
        Ablation::Full,
    ];

    /// True when the model splits each level into (s, u) pairs.
    pub fn has_decoupler(self) -> bool {
        matches!(self, Ablation::SfdOnly | Ablation::Full)
    }

    /// True when the model carries the edge branch (and so also injection).
    pub fn has_edge_branch(self) -> bool {
        matches!(self, Ablation::EmeEiiOnly | Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::SfdOnly => "sfd_only",
            Ablation::EmeEiiOnly => "eme_eii_only",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = EppsError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                EppsError::config(format!(
                    "unknown ablation '{s}' (expected baseline, sfd_only, eme_eii_only or full)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub ablation: Ablation,
    /// When true the edge branch reads the decoupled significant feature s1
    /// instead of the raw encoder feature f1.
    pub eme_from_significant: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: Backbone::Resnet50,
            ablation: Ablation::Full,
            eme_from_significant: false,
        }
    }
}

/// One decoupled level as plain tensors.
#[derive(Debug, Clone)]
pub struct DecoupledPair<S: Scalar> {
    pub s: Tensor<S>,
    pub u: Tensor<S>,
    pub level: usize,
}

/// Graph handles for one decoupled level.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub s: Var,
    pub u: Var,
    pub level: usize,
}

/// Graph handles produced by a forward pass; losses are built on top of
/// these. Optional parts are absent under the ablations that remove them.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub mask_logits: Var,
    pub edge_logits: Option<Var>,
    pub f_e: Option<Var>,
    /// Ordered level 1..4; empty without the decoupler.
    pub pairs: Vec<PairVars>,
}

/// Forward results as plain tensors (inference path).
#[derive(Debug, Clone)]
pub struct ModelOutput<S: Scalar> {
    pub mask_logits: Tensor<S>,
    pub edge_logits: Option<Tensor<S>>,
    pub f_e: Option<Tensor<S>>,
    pub pairs: Vec<DecoupledPair<S>>,
}

enum Adapters {
    Decoupled(Box<[Sfd; 4]>),
    Plain(Box<[Cbr; 4]>),
}

pub struct EppsModel<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    encoder: Encoder,
    adapters: Adapters,
    eme: Option<Eme>,
    decoder: Decoder,
    ffm: Ffm,
    mine: Vec<StatisticNetwork>,
}

impl<S: Scalar> EppsModel<S> {
    /// Builds the model with reproducible random initialization: the same
    /// `(config, seed)` always yields bitwise-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = config.backbone;
        let channels = backbone.pyramid_channels();
        let widths = backbone.decoder_widths();
        let ce = backbone.edge_width();

        let encoder = Encoder::new(&mut store, &mut rng, backbone);
        let adapters = if config.ablation.has_decoupler() {
            Adapters::Decoupled(Box::new(std::array::from_fn(|i| {
                Sfd::new(&mut store, &mut rng, i + 1, channels[i])
            })))
        } else {
            Adapters::Plain(Box::new(std::array::from_fn(|i| {
                Cbr::new(&mut store, &mut rng, &format!("adapt{}", i + 1), channels[i], channels[i], 3, 1)
            })))
        };
        let eme = config
            .ablation
            .has_edge_branch()
            .then(|| Eme::new(&mut store, &mut rng, channels[0], ce));
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            channels,
            widths,
            ce,
            backbone.attention_ratio(),
            config.ablation.has_edge_branch(),
        );
        let ffm = Ffm::new(&mut store, &mut rng, widths, backbone.fuse_width());
        let mine = if config.ablation.has_decoupler() {
            (0..4)
                .map(|i| {
                    StatisticNetwork::new(
                        &mut store,
                        &mut rng,
                        &format!("mine{}", i + 1),
                        32 * channels[i],
                        backbone.mine_hidden(),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };

        EppsModel {
            config,
            store,
            encoder,
            adapters,
            eme,
            decoder,
            ffm,
            mine,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Statistic networks for the four levels; empty without the decoupler.
    pub fn mine_nets(&self) -> &[StatisticNetwork] {
        &self.mine
    }

    /// Runs the network on `image` (`[B,3,H,W]`, spatial sizes divisible by
    /// 32), recording the computation on `tape`.
    pub fn forward(&mut self, tape: &mut Tape<S>, image: &Tensor<S>, training: bool) -> Result<ForwardVars> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(EppsError::shape(format!(
                "expected an image batch [B,3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(EppsError::shape(format!(
                "spatial size {h}x{w} not divisible by 32"
            )));
        }
        let image = tape.constant(image.clone());
        let pyramid = self.encoder.forward(&mut self.store, tape, image, training);

        let mut pairs = Vec::new();
        let skips: [Var; 4] = match &self.adapters {
            Adapters::Decoupled(sfds) => std::array::from_fn(|i| {
                let (s, u) = sfds[i].forward(&mut self.store, tape, pyramid[i], training);
                pairs.push(PairVars { s, u, level: i + 1 });
                s
            }),
            Adapters::Plain(cbrs) => {
                std::array::from_fn(|i| cbrs[i].forward(&mut self.store, tape, pyramid[i], training))
            }
        };

        let mut f_e = None;
        let mut edge_logits = None;
        if let Some(eme) = &self.eme {
            let source = if self.config.eme_from_significant {
                skips[0]
            } else {
                pyramid[0]
            };
            let (fe, el) = eme.forward(&mut self.store, tape, source, training)?;
            f_e = Some(fe);
            edge_logits = Some(el);
        }

        let feats = self
            .decoder
            .forward(&mut self.store, tape, &skips, f_e, training)?;
        let mask_logits = self.ffm.forward(&mut self.store, tape, &feats, h, w);

        Ok(ForwardVars {
            mask_logits,
            edge_logits,
            f_e,
            pairs,
        })
    }

    /// Evaluation-mode forward returning plain tensors.
    pub fn infer(&mut self, image: &Tensor<S>) -> Result<ModelOutput<S>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, image, false)?;
        Ok(ModelOutput {
            mask_logits: tape.value(vars.mask_logits).clone(),
            edge_logits: vars.edge_logits.map(|v| tape.value(v).clone()),
            f_e: vars.f_e.map(|v| tape.value(v).clone()),
            pairs: vars
                .pairs
                .iter()
                .map(|p| DecoupledPair {
                    s: tape.value(p.s).clone(),
                    u: tape.value(p.u).clone(),
                    level: p.level,
                })
                .collect(),
        })
    }
}
