use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, ParamStore, Tape, Tensor};
use crate::encoder::{
    self, extract_random, extract_topk, AdjacencyMode, ArgumentSet, ConditionEncoder, EncoderConfig, EncoderVariant,
};
use crate::error::{Error, Result};
use crate::flow::{self, VelocityConfig, VelocityNet};
use crate::ode::{Sampled, Sampler, SolverConfig};
use crate::pose::{Heatmap, Skeleton, Standardizer};

/// Model ablations. Each one changes a single subsystem of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Zero condition vector; no encoder parameters.
    #[serde(rename = "no-condition")]
    NoCondition,
    /// Graph layer replaced by a dense layer.
    #[serde(rename = "no-gcn")]
    NoGcn,
    #[serde(rename = "no-dropout")]
    NoDropout,
    /// Arguments drawn in proportion to heatmap mass instead of top-k.
    #[serde(rename = "random-sampling")]
    RandomSampling,
    /// Adjacency fixed to the skeleton incidence.
    #[serde(rename = "fixed-A")]
    FixedA,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoCondition,
        Variant::NoGcn,
        Variant::NoDropout,
        Variant::RandomSampling,
        Variant::FixedA,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCondition => "no-condition",
            Variant::NoGcn => "no-gcn",
            Variant::NoDropout => "no-dropout",
            Variant::RandomSampling => "random-sampling",
            Variant::FixedA => "fixed-A",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Parameter(format!("unknown variant '{s}' (valid: {})", names.join(", ")))
            })
    }
}

/// Network sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub k: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f32,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 17,
            k: 48,
            embed_dim: 64,
            cond_dim: 144,
            hidden: 1024,
            blocks: 2,
            dropout: 0.1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            joints: self.joints,
            k: self.k,
            embed_dim: self.embed_dim,
            cond_dim: self.cond_dim,
            variant: match self.variant {
                Variant::NoCondition => EncoderVariant::NoCondition,
                Variant::NoGcn => EncoderVariant::NoGcn,
                _ => EncoderVariant::Full,
            },
            adjacency: match self.variant {
                Variant::FixedA => AdjacencyMode::FixedSkeleton,
                _ => AdjacencyMode::Learnable,
            },
        }
    }

    pub fn velocity(&self) -> VelocityConfig {
        VelocityConfig {
            joints: self.joints,
            cond_dim: self.cond_dim,
            hidden: self.hidden,
            blocks: self.blocks,
            dropout: if self.variant == Variant::NoDropout {
                0.0
            } else {
                self.dropout
            },
        }
    }
}

/// Everything besides the weights needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub skeleton: Skeleton,
    pub standardizer: Standardizer,
    /// Training settings echoed for provenance; ignored when loading.
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCounts {
    pub encoder: usize,
    pub flow: usize,
}

impl ParameterCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.flow
    }
}

/// Condition encoder plus velocity network over one parameter store.
#[derive(Clone, Debug)]
pub struct FlowLifter {
    pub config: ModelConfig,
    pub skeleton: Skeleton,
    pub standardizer: Standardizer,
    pub store: ParamStore,
    pub encoder: ConditionEncoder,
    pub flow: VelocityNet,
}

impl FlowLifter {
    /// Fresh model with weights drawn from `rng` (encoder first).
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        skeleton: Skeleton,
        standardizer: Standardizer,
        rng: &mut R,
    ) -> Result<Self> {
        skeleton.validate()?;
        let mut store = ParamStore::new();
        let encoder = ConditionEncoder::build(config.encoder(), &skeleton, &mut store, rng)?;
        let flow = VelocityNet::build(config.velocity(), &mut store, rng)?;
        Ok(FlowLifter {
            config,
            skeleton,
            standardizer,
            store,
            encoder,
            flow,
        })
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        ParameterCounts {
            encoder: self.store.trainable_count(encoder::PREFIX),
            flow: self.store.trainable_count(flow::PREFIX),
        }
    }

    pub fn meta(&self, train: Option<serde_json::Value>) -> ModelMeta {
        ModelMeta {
            model: self.config,
            skeleton: self.skeleton.clone(),
            standardizer: self.standardizer,
            train,
        }
    }

    /// Argument set used at inference: unshuffled top-k, or random draws
    /// for the random-sampling variant.
    pub fn arguments<R: Rng + ?Sized>(&self, heatmaps: &[Heatmap], rng: &mut R) -> Result<ArgumentSet> {
        if heatmaps.len() != self.config.joints {
            return Err(Error::Incompatible(format!(
                "{} heatmaps for a {}-joint model",
                heatmaps.len(),
                self.config.joints
            )));
        }
        match self.config.variant {
            Variant::RandomSampling => extract_random(heatmaps, self.config.k, &self.standardizer, rng),
            _ => extract_topk(heatmaps, self.config.k, &self.standardizer, rng, false),
        }
    }

    /// Condition vector for one argument set.
    pub fn condition(&self, args: &ArgumentSet) -> Result<Vec<f32>> {
        let mut tape = Tape::inference(&self.store);
        let c = self.encoder.encode(&mut tape, &[args])?;
        Ok(tape.value(c).data().to_vec())
    }

    pub fn sampler(&self, solver: SolverConfig) -> Sampler<'_> {
        Sampler {
            net: &self.flow,
            store: &self.store,
            solver,
        }
    }

    /// `h` hypotheses for one sample's heatmaps; `rng` supplies random
    /// arguments (if any) and then the starting points.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        source_id: &str,
        heatmaps: &[Heatmap],
        h: usize,
        solver: SolverConfig,
        rng: &mut R,
        deterministic_zero: bool,
        record: bool,
    ) -> Result<Sampled> {
        let args = self.arguments(heatmaps, rng)?;
        let c = self.condition(&args)?;
        self.sampler(solver)
            .sample(source_id, &c, h, rng, deterministic_zero, record)
    }

    /// Learned (or fixed) adjacency, `J x J` row-major.
    pub fn adjacency(&self) -> Option<&Tensor> {
        self.encoder.adjacency().map(|id| self.store.value(id))
    }

    /// Writes `path` (weights) and `path` with a `.json` extension (meta).
    pub fn save(&self, path: &Path, train: Option<serde_json::Value>) -> Result<()> {
        checkpoint::save(&self.store, path)?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&self.meta(train)).expect("meta serializes");
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            reason: e.to_string(),
        })?;
        let weights = checkpoint::load(path)?;
        Self::from_parts(meta, &weights)
    }

    pub fn from_parts(meta: ModelMeta, weights: &ParamStore) -> Result<Self> {
        let mut model = FlowLifter::new(
            meta.model,
            meta.skeleton,
            meta.standardizer,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        model.store.load_values(weights)?;
        Ok(model)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}
