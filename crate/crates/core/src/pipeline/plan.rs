use serde::{Deserialize, Serialize};

use crate::dp::DpParams;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::derive_seed;
use crate::watermark::EmbedConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// `None` releases clipped activations without noise.
    pub epsilon: Option<f64>,
    pub clip_radius: f64,
}

impl DpConfig {
    pub fn params(&self) -> Result<DpParams> {
        match self.epsilon {
            Some(eps) => DpParams::new(eps, self.clip_radius),
            None => DpParams::noiseless(self.clip_radius),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub q: usize,
    pub g: Vec<usize>,
    pub augment_sigma: f64,
}

impl LabelConfig {
    pub fn uniform(q: usize, g: usize, augment_sigma: f64) -> Self {
        Self {
            q,
            g: vec![g; q],
            augment_sigma,
        }
    }

    pub fn pseudo_count(&self) -> usize {
        self.g.iter().sum()
    }

    pub fn gamma(&self) -> f64 {
        self.pseudo_count() as f64 / self.q as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub label_map: u64,
    pub expand: u64,
    pub client_init: u64,
    pub dp_noise: u64,
    pub batch_order: u64,
    pub trainers: Vec<u64>,
}

impl Seeds {
    /// Every role seed derived from one base seed.
    pub fn from_base(seed: u64, trainers: usize) -> Self {
        Self {
            label_map: derive_seed(seed, "label_map"),
            expand: derive_seed(seed, "expand"),
            client_init: derive_seed(seed, "client_init"),
            dp_noise: derive_seed(seed, "dp_noise"),
            batch_order: derive_seed(seed, "batch_order"),
            trainers: (0..trainers)
                .map(|i| derive_seed(seed, &format!("trainer/{}", i + 1)))
                .collect(),
        }
    }
}

/// How the client builds its frozen encoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Random ReLU layers.
    #[default]
    Relu,
    /// One random linear map whose output is shifted to zero mean on the
    /// client's own training inputs.
    CentredLinear,
}

impl EncoderKind {
    /// Activation applied by every encoder layer.
    pub fn activation(self) -> Activation {
        match self {
            Self::Relu => Activation::Relu,
            Self::CentredLinear => Activation::Identity,
        }
    }
}

fn relu() -> Activation {
    Activation::Relu
}

/// Topology, hyperparameters and seeds agreed before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    /// Client encoder widths, input first; the last entry is the cut width.
    pub client_dims: Vec<usize>,
    /// One width list per trainer, in execution order.
    pub trainer_dims: Vec<Vec<usize>>,
    #[serde(default)]
    pub encoder: EncoderKind,
    /// Activation after every trainer layer except the final logits.
    #[serde(default = "relu")]
    pub trainer_activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// L2 penalty on trainer weights during relay training.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub early_stop: bool,
    pub dp: DpConfig,
    pub label: LabelConfig,
    pub watermark: EmbedConfig,
    pub identities: Vec<String>,
    pub nonces: Vec<u64>,
    pub seeds: Seeds,
}

impl ExperimentPlan {
    pub fn trainers(&self) -> usize {
        self.trainer_dims.len()
    }

    /// Re-seeds every role from one base seed, keeping nonces publisher-fixed.
    pub fn reseed(&mut self, seed: u64) {
        self.seeds = Seeds::from_base(seed, self.trainers());
    }
}

/// Output of negotiation: the fixed execution order and interface shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub trainers: usize,
    pub input_dim: usize,
    /// `widths[0]` is the cut width, `widths[i]` the output width of `T_i`;
    /// the last entry equals the pseudo-class count.
    pub widths: Vec<usize>,
}

impl Topology {
    /// Bytes crossing each link `C->T1, T1->T2, ...` per mini-batch forward.
    pub fn interface_bytes(&self, batch: usize) -> Vec<f64> {
        self.widths[..self.trainers]
            .iter()
            .map(|&w| super::latency::activation_bytes(batch, w))
            .collect()
    }
}

pub fn negotiate(plan: &ExperimentPlan) -> Result<Topology> {
    let n = plan.trainers();
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one trainer".into()));
    }
    if plan.epochs == 0 || plan.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
    }
    if !(plan.lr > 0.0 && plan.lr.is_finite()) || !(0.0..1.0).contains(&plan.momentum) {
        return Err(Error::InvalidArgument("need lr > 0 and momentum in [0, 1)".into()));
    }
    if !(plan.weight_decay >= 0.0 && plan.weight_decay.is_finite()) {
        return Err(Error::InvalidArgument("weight_decay must be finite and >= 0".into()));
    }
    if plan.client_dims.len() < 2 || plan.trainer_dims.iter().any(|d| d.len() < 2) {
        return Err(Error::Shape("every segment needs an input and an output width".into()));
    }
    if plan.encoder == EncoderKind::CentredLinear && plan.client_dims.len() != 2 {
        return Err(Error::InvalidArgument(
            "a centred linear encoder is a single layer".into(),
        ));
    }
    if plan.client_dims.iter().chain(plan.trainer_dims.iter().flatten()).any(|&w| w == 0) {
        return Err(Error::Shape("widths must be positive".into()));
    }
    let mut widths = vec![*plan.client_dims.last().unwrap()];
    for (i, dims) in plan.trainer_dims.iter().enumerate() {
        let upstream = *widths.last().unwrap();
        if dims[0] != upstream {
            return Err(Error::Shape(format!(
                "T{} expects width {} but its upstream emits {}",
                i + 1,
                dims[0],
                upstream
            )));
        }
        widths.push(*dims.last().unwrap());
    }
    if plan.label.g.len() != plan.label.q || plan.label.q < 2 || plan.label.g.contains(&0) {
        return Err(Error::InvalidArgument("label config needs q >= 2 and q factors >= 1".into()));
    }
    let classes = plan.label.pseudo_count();
    if *widths.last().unwrap() != classes {
        return Err(Error::Shape(format!(
            "T{n} emits {} logits but there are {classes} pseudo classes",
            widths.last().unwrap()
        )));
    }
    if plan.identities.len() != n || plan.nonces.len() != n || plan.seeds.trainers.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need {n} identities, nonces and trainer seeds"
        )));
    }
    plan.dp.params()?;
    plan.watermark.validate()?;
    Ok(Topology {
        trainers: n,
        input_dim: plan.client_dims[0],
        widths,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn small_plan(trainer_dims: Vec<Vec<usize>>) -> ExperimentPlan {
        let n = trainer_dims.len();
        ExperimentPlan {
            client_dims: vec![8, 8],
            trainer_dims,
            encoder: EncoderKind::Relu,
            trainer_activation: Activation::Relu,
            epochs: 2,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            weight_decay: 0.0,
            early_stop: false,
            dp: DpConfig {
                epsilon: Some(5.0),
                clip_radius: 1.0,
            },
            label: LabelConfig::uniform(2, 2, 0.1),
            watermark: EmbedConfig {
                bits: 4,
                positions: Some(8),
                ..EmbedConfig::default()
            },
            identities: (1..=n).map(|i| format!("T{i}")).collect(),
            nonces: (1..=n as u64).collect(),
            seeds: Seeds::from_base(1, n),
        }
    }

    #[test]
    fn single_trainer_is_vanilla_split_learning() {
        let t = negotiate(&small_plan(vec![vec![8, 4]])).unwrap();
        assert_eq!(t.trainers, 1);
        assert_eq!(t.widths, vec![8, 4]);
    }

    #[test]
    fn interface_widths_must_chain() {
        assert!(negotiate(&small_plan(vec![vec![8, 4], vec![4, 4]])).is_ok());
        assert!(matches!(
            negotiate(&small_plan(vec![vec![8, 4], vec![5, 4]])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn three_trainer_chain_validates() {
        let t = negotiate(&small_plan(vec![vec![8, 6], vec![6, 6], vec![6, 4]])).unwrap();
        assert_eq!(t.interface_bytes(2), vec![128.0, 96.0, 96.0]);
    }

    #[test]
    fn rejects_zero_trainers_and_wrong_logits() {
        assert!(negotiate(&small_plan(vec![])).is_err());
        assert!(negotiate(&small_plan(vec![vec![8, 5]])).is_err());
    }
}
