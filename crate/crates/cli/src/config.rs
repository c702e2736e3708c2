//! Run configuration. One TOML file drives every subcommand; see
//! `configs/*.toml` for annotated presets.
//!
//! Keys that follow from other keys (per-model `resolution`, `channels`,
//! class and attribute counts, feature widths) are derived and rejected when
//! present, so a file cannot describe an inconsistent pipeline.

use std::path::{Path, PathBuf};

use privad::data::synth::{ActionConfig, AnomalyConfig, PrivacyConfig};
use privad::data::CLIP_LENGTH;
use privad::losses::LossConfig;
use privad::models::checkpoint::sha256_hex;
use privad::models::{
    AnomalyHeadConfig, AnonymizerConfig, BudgetEncoderConfig, PrivacyProbeConfig, UtilityEncoderConfig,
};
use privad::training::TrainConfig;
use privad::{Error, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};

const DEFAULT_PRESET: &str = include_str!("../../../configs/default.toml");
const TOY_PRESET: &str = include_str!("../../../configs/toy.toml");
const TINY_PRESET: &str = include_str!("../../../configs/tiny.toml");

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 3] = ["default", "toy", "tiny"];

/// Where the datasets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `gen-data` renders the toy generators into `data.root`.
    #[default]
    Synthetic,
    /// `gen-data` only validates and fingerprints existing split directories.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory; `<output_dir>/data` when unset.
    pub root: Option<PathBuf>,
    /// Training split of the proxy action task.
    pub action: ActionConfig,
    pub action_test_videos_per_class: usize,
    pub privacy: PrivacyConfig,
    pub privacy_test_images: usize,
    /// Training split of the anomaly task.
    pub anomaly: AnomalyConfig,
    /// Videos per class in the anomaly validation split.
    pub anomaly_val_videos: usize,
    /// Videos per class in the anomaly test split.
    pub anomaly_test_videos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: None,
            action: ActionConfig::default(),
            action_test_videos_per_class: 8,
            privacy: PrivacyConfig::default(),
            privacy_test_images: 500,
            anomaly: AnomalyConfig::default(),
            anomaly_val_videos: 12,
            anomaly_test_videos: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub anonymizer: AnonymizerConfig,
    pub utility: UtilityEncoderConfig,
    pub budget: BudgetEncoderConfig,
    /// Backbone of the privacy attack model; its head width is derived.
    pub attack: BudgetEncoderConfig,
    pub anomaly_head: AnomalyHeadConfig,
    pub probe: PrivacyProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Clips per video for the intra-video embedding distance.
    pub clips_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { clips_per_video: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Frame side shared by every dataset and model.
    pub resolution: usize,
    pub data: DataConfig,
    pub models: ModelsConfig,
    /// Training settings; `train.loss` holds the `[loss]` table.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: u64,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default = "default_resolution")]
    resolution: usize,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    models: ModelsConfig,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default)]
    eval: EvalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_resolution() -> usize {
    32
}

const DERIVED: [(&str, &str, &str); 21] = [
    ("data.action", "resolution", "resolution"),
    ("data.privacy", "resolution", "resolution"),
    ("data.anomaly", "resolution", "resolution"),
    ("data.privacy", "attribute_frequencies", "data.action.attribute_frequencies"),
    ("data.anomaly", "attribute_frequencies", "data.action.attribute_frequencies"),
    ("models.anonymizer", "resolution", "resolution"),
    ("models.anonymizer", "channels", "the RGB datasets"),
    ("models.utility", "resolution", "resolution"),
    ("models.utility", "channels", "the RGB datasets"),
    ("models.utility", "clip_length", "the 16-frame clip length"),
    ("models.utility", "classes", "data.action.classes"),
    ("models.budget", "resolution", "resolution"),
    ("models.budget", "channels", "the RGB datasets"),
    ("models.budget", "outputs", "the budget task (no head)"),
    ("models.attack", "resolution", "resolution"),
    ("models.attack", "channels", "the RGB datasets"),
    ("models.attack", "outputs", "the attribute count"),
    ("models.anomaly_head", "feature_dim", "models.utility.feature_dim"),
    ("models.probe", "input_dim", "models.utility.feature_dim"),
    ("models.probe", "attributes", "the attribute count"),
    ("train", "seed", "the top-level seed"),
];

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Table> {
    dotted.split('.').try_fold(table, |t, key| t.get(key)?.as_table())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (section, key, source) in DERIVED {
            if lookup(&table, section).is_some_and(|t| t.contains_key(key)) {
                return Err(Error::Config(format!("`{section}.{key}` is derived from {source}; remove it")));
            }
        }
        if lookup(&table, "train").is_some_and(|t| t.contains_key("loss")) {
            return Err(Error::Config("loss settings belong in the top-level `[loss]` table".into()));
        }
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut train_table = raw.train;
        train_table.insert("seed".into(), toml::Value::Integer(raw.seed as i64));
        let mut train: TrainConfig = toml::Value::Table(train_table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))?;
        train.loss = raw.loss;
        let mut cfg = Self {
            seed: raw.seed,
            output_dir: raw.output_dir,
            resolution: raw.resolution,
            data: raw.data,
            models: raw.models,
            train,
            eval: raw.eval,
        };
        cfg.derive();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// TOML text of a built-in preset.
    pub fn preset_text(name: &str) -> Result<&'static str> {
        match name {
            "default" => Ok(DEFAULT_PRESET),
            "toy" => Ok(TOY_PRESET),
            "tiny" => Ok(TINY_PRESET),
            other => Err(Error::Config(format!("unknown preset `{other}`; expected one of {PRESETS:?}"))),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(Self::preset_text(name)?)
    }

    fn derive(&mut self) {
        let r = self.resolution;
        let freqs = self.data.action.attribute_frequencies.clone();
        let attributes = freqs.len();
        let d = &mut self.data;
        d.action.resolution = r;
        d.privacy.resolution = r;
        d.anomaly.resolution = r;
        d.privacy.attribute_frequencies = freqs.clone();
        d.anomaly.attribute_frequencies = freqs;
        let m = &mut self.models;
        m.anonymizer.resolution = r;
        m.anonymizer.channels = 3;
        m.utility.resolution = r;
        m.utility.channels = 3;
        m.utility.clip_length = CLIP_LENGTH;
        m.utility.classes = d.action.classes;
        m.budget.resolution = r;
        m.budget.channels = 3;
        m.budget.outputs = None;
        m.attack.resolution = r;
        m.attack.channels = 3;
        m.attack.outputs = Some(attributes);
        m.anomaly_head.feature_dim = m.utility.feature_dim;
        m.probe.input_dim = m.utility.feature_dim;
        m.probe.attributes = attributes;
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a multiple of 4 and >= 16, got {}",
                self.resolution
            )));
        }
        self.train.validate()?;
        let d = &self.data;
        let sizes = [
            ("data.action.videos_per_class", d.action.videos_per_class),
            ("data.action_test_videos_per_class", d.action_test_videos_per_class),
            ("data.privacy.images", d.privacy.images),
            ("data.privacy_test_images", d.privacy_test_images),
            ("data.anomaly.normal_videos", d.anomaly.normal_videos),
            ("data.anomaly.anomalous_videos", d.anomaly.anomalous_videos),
            ("data.anomaly_val_videos", d.anomaly_val_videos),
            ("data.anomaly_test_videos", d.anomaly_test_videos),
            ("data.action.classes", d.action.classes),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let triplet_span = 2 * privad::data::window_span(CLIP_LENGTH, privad::data::SKIP_RATE);
        if d.action.frames < triplet_span {
            return Err(Error::Config(format!(
                "data.action.frames must be >= {triplet_span} so a video holds two disjoint clip windows, got {}",
                d.action.frames
            )));
        }
        if d.anomaly.frames < CLIP_LENGTH {
            return Err(Error::Config(format!(
                "data.anomaly.frames must be >= {CLIP_LENGTH}, got {}",
                d.anomaly.frames
            )));
        }
        if self.eval.clips_per_video < 2 {
            return Err(Error::Config("eval.clips_per_video must be >= 2".into()));
        }
        if self.models.probe.hidden.contains(&0) {
            return Err(Error::Config("models.probe.hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical configuration without its locations, so a
    /// run directory can move without going stale.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.data.root = None;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    /// Generator seed of one dataset split.
    pub fn split_seed(&self, split: &str) -> u64 {
        self.train.rng(&format!("data/{split}")).next_u64()
    }
}
