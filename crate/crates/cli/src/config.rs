//! The run configuration: one JSON file, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segnbdt::model::{ModelConfig, TrainConfig};
use segnbdt::mrc::MrcConfig;
use segnbdt::rng::derive_seed;
use segnbdt::sir::RemovalMode;
use segnbdt::synth::SceneSpec;
use segnbdt::tree::{FinetuneConfig, InferenceMode};
use segnbdt::vdr::OverlapMode;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scene to generate; the built-in six-class scene when absent.
    pub scene: Option<SceneSpec>,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Existing datasets used instead of generated ones.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: None,
            train_samples: 2000,
            test_samples: 100,
            train_dir: None,
            test_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub dilations: Vec<usize>,
    pub conv_bias: bool,
    pub min_input: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(2, 0);
        Self {
            feature_dim: m.feature_dim,
            dilations: m.dilations,
            conv_bias: m.conv_bias,
            min_input: m.min_input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SirModeName {
    Shuffle,
    /// Shuffle across all instances of a part instead of within each one.
    ShuffleClass,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrcSection {
    pub beta: usize,
    pub n: usize,
    pub center_patch: usize,
    pub padding: segnbdt::mrc::PaddingPolicy,
    /// Test images analysed.
    pub images: usize,
    /// Scan UMRC from the largest crop down.
    pub monotone: bool,
}

impl Default for MrcSection {
    fn default() -> Self {
        Self {
            beta: 8,
            n: 6,
            center_patch: 1,
            padding: segnbdt::mrc::PaddingPolicy::Clamp,
            images: 4,
            monotone: false,
        }
    }
}

impl MrcSection {
    pub fn mrc_config(&self) -> MrcConfig {
        MrcConfig {
            beta: self.beta,
            n: self.n,
            center_patch: self.center_patch,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    pub layer: String,
    pub images: usize,
    /// Average over ground-truth pixels of the class instead of predicted ones.
    pub ground_truth: bool,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            layer: segnbdt::model::FEATURES_LAYER.into(),
            images: 4,
            ground_truth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VdrSection {
    pub layer: String,
    pub overlap: OverlapMode,
    pub images: usize,
}

impl Default for VdrSection {
    fn default() -> Self {
        Self {
            layer: segnbdt::model::FEATURES_LAYER.into(),
            overlap: OverlapMode::Continuous,
            images: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirSection {
    /// Removal modes to run; both when absent.
    pub mode: Option<SirModeName>,
    pub images: usize,
    /// Inner nodes to analyse; all inner nodes when absent.
    pub nodes: Option<Vec<usize>>,
}

impl Default for SirSection {
    fn default() -> Self {
        Self {
            mode: None,
            images: 20,
            nodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub images: usize,
    pub layer: String,
    /// Nearest-neighbour enlargement of every panel.
    pub scale: u32,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            images: 4,
            layer: "conv3".into(),
            scale: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream is derived from this seed.
    pub seed: u64,
    pub out: PathBuf,
    /// Inference mode of the tree for `eval`, `mrc` and `report`; `eval`
    /// reports both when absent.
    pub mode: Option<InferenceMode>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub mrc: MrcSection,
    pub saliency: SaliencySection,
    pub vdr: VdrSection,
    pub sir: SirSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            mode: None,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            mrc: MrcSection::default(),
            saliency: SaliencySection::default(),
            vdr: VdrSection::default(),
            sir: SirSection::default(),
            report: ReportSection::default(),
        }
    }
}

/// Stream indices handed to [`derive_seed`].
mod stream {
    pub const TRAIN_DATA: u64 = 0;
    pub const TEST_DATA: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const SIR: u64 = 5;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(scene) = &self.data.scene {
            scene.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return bad("data.train_samples and data.test_samples must be at least 1".into());
        }
        for dir in [&self.data.train_dir, &self.data.test_dir].into_iter().flatten() {
            if !dir.join(segnbdt::synth::MANIFEST_FILE).is_file() {
                return bad(format!("dataset directory {} has no manifest", dir.display()));
            }
        }
        if self.model.feature_dim == 0 || self.model.dilations.is_empty() || self.model.min_input == 0 {
            return bad("model.feature_dim, model.dilations and model.min_input must be nonempty".into());
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return bad("train needs positive epochs, batch_size and learning_rate".into());
        }
        if self.finetune.batch_size == 0 || !(self.finetune.learning_rate > 0.0) {
            return bad("finetune needs positive batch_size and learning_rate".into());
        }
        if !(self.finetune.omega >= 0.0) {
            return bad(format!("finetune.omega must be nonnegative, got {}", self.finetune.omega));
        }
        self.mrc
            .mrc_config()
            .validate()
            .map_err(|e| CliError::Config(format!("mrc: {e}")))?;
        if self.mrc.beta < self.model.min_input {
            return bad(format!(
                "mrc.beta {} is below model.min_input {}",
                self.mrc.beta, self.model.min_input
            ));
        }
        if let OverlapMode::Threshold { tau } = self.vdr.overlap {
            if !(0.0..1.0).contains(&tau) {
                return bad(format!("vdr.overlap.tau must lie in [0, 1), got {tau}"));
            }
        }
        for (what, n) in [
            ("mrc.images", self.mrc.images),
            ("saliency.images", self.saliency.images),
            ("vdr.images", self.vdr.images),
            ("sir.images", self.sir.images),
            ("report.images", self.report.images),
        ] {
            if n == 0 {
                return bad(format!("{what} must be at least 1"));
            }
        }
        let probe = ModelConfig {
            dilations: self.model.dilations.clone(),
            ..ModelConfig::new(2, 0)
        };
        let layers = probe.dilations.len();
        for (what, layer) in [
            ("saliency.layer", &self.saliency.layer),
            ("vdr.layer", &self.vdr.layer),
            ("report.layer", &self.report.layer),
        ] {
            let ok = layer == segnbdt::model::FEATURES_LAYER
                || layer
                    .strip_prefix("conv")
                    .and_then(|n| n.parse::<usize>().ok())
                    .is_some_and(|n| (1..=layers).contains(&n));
            if !ok {
                return bad(format!("{what}: unknown layer {layer:?}"));
            }
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneSpec {
        self.data.scene.clone().unwrap_or_else(|| SceneSpec::default_scene(0))
    }

    pub fn train_scene(&self) -> SceneSpec {
        SceneSpec {
            seed: derive_seed(self.seed, &[stream::TRAIN_DATA]),
            ..self.scene()
        }
    }

    pub fn test_scene(&self) -> SceneSpec {
        SceneSpec {
            seed: derive_seed(self.seed, &[stream::TEST_DATA]),
            ..self.scene()
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            feature_dim: self.model.feature_dim,
            num_classes,
            dilations: self.model.dilations.clone(),
            conv_bias: self.model.conv_bias,
            min_input: self.model.min_input,
            init_seed: derive_seed(self.seed, &[stream::MODEL_INIT]),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[stream::TRAIN]),
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: derive_seed(self.seed, &[stream::FINETUNE]),
            ..self.finetune.clone()
        }
    }

    pub fn removal_modes(&self) -> Vec<RemovalMode> {
        let shuffle = RemovalMode::Shuffle {
            seed: derive_seed(self.seed, &[stream::SIR]),
        };
        match self.sir.mode {
            Some(SirModeName::Shuffle) => vec![shuffle],
            Some(SirModeName::ShuffleClass) => vec![RemovalMode::ShuffleClass {
                seed: derive_seed(self.seed, &[stream::SIR]),
            }],
            Some(SirModeName::Zero) => vec![RemovalMode::Zero],
            None => vec![shuffle, RemovalMode::Zero],
        }
    }

    /// SHA-256 of the canonical JSON of everything except the output
    /// directory, so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out");
        }
        let bytes = serde_json::to_vec(&value).expect("value serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"mrc": {"bta": 1}}"#).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = RunConfig::default();
        c.mrc.center_patch = 2;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.saliency.layer = "conv9".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.data.train_dir = Some("/nonexistent/dataset".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_ignores_out_and_tracks_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: "elsewhere".into(),
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
