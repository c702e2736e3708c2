//! The stages behind each subcommand. Every stage reads its inputs from the
//! run directory, refuses to run on missing or stale upstream outputs, and
//! records a manifest of what it wrote.
//!
//! Run directory layout:
//!
//! ```text
//! data/<split>/                 datasets (or data.root)
//! checkpoints/<model>.ckpt      weights plus .ckpt.manifest
//! features/<method>/<split>/    one .feat file per video
//! logs/<stage>.jsonl            training curves
//! metrics/<stage>.json          metric records
//! reports/                      trade-off table and plot data
//! plots/                        per-video score traces
//! manifests/<stage>.json        stage provenance
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use privad::baselines::{ToyBoxProvider, Transform};
use privad::data::io::{read_privacy_dataset, read_video_dataset, write_privacy_dataset, write_video_dataset};
use privad::data::synth::{
    generate_toy_action_dataset, generate_toy_anomaly_dataset, generate_toy_privacy_dataset, ActionConfig,
    AnomalyConfig, DatasetKind, PrivacyConfig, PrivacyDataset, VideoDataset,
};
use privad::data::CLIP_LENGTH;
use privad::evaluation::{
    build_tradeoff_report, plot_score_trace, read_metrics, render_score_svg, write_metrics, AnomalyScoreTrace,
    MethodResult, MetricRecord, TradeoffReport,
};
use privad::models::checkpoint::{self, read_manifest};
use privad::models::{AnomalyHead, Anonymizer, BudgetEncoder, Model, PrivacyProbe, UtilityEncoder};
use privad::training::{
    action_accuracy, anonymize_chunked, attack_cmap, budget_separation, extract_features, init_encoders, intra_video_distance,
    pretrain_identity, read_feature_dir, score_video, train_anomaly_detector, train_anonymization,
    train_feature_probe, train_privacy_attack, write_feature_dir, FeatureMode, FeatureSet, TrainLog,
};
use privad::{Error, Result, Tensor};

use crate::config::{DataSource, RunConfig};
use crate::manifest::{manifest_path, StageManifest};

pub const ACTION_TRAIN: &str = "action_train";
pub const ACTION_TEST: &str = "action_test";
pub const PRIVACY_TRAIN: &str = "privacy_train";
pub const PRIVACY_TEST: &str = "privacy_test";
pub const ANOMALY_TRAIN: &str = "anomaly_train";
pub const ANOMALY_VAL: &str = "anomaly_val";
pub const ANOMALY_TEST: &str = "anomaly_test";
pub const SPLITS: [&str; 7] = [
    ACTION_TRAIN,
    ACTION_TEST,
    PRIVACY_TRAIN,
    PRIVACY_TEST,
    ANOMALY_TRAIN,
    ANOMALY_VAL,
    ANOMALY_TEST,
];
const ANOMALY_SPLITS: [&str; 3] = [ANOMALY_TRAIN, ANOMALY_VAL, ANOMALY_TEST];

const GEN_DATA: &str = "gen-data";
const PRETRAIN: &str = "pretrain-anon";
const TRAIN_ANON: &str = "train-anon";
const PROBE: &str = "probe-features";
const REPORT: &str = "report";

const ANON_CHUNK: usize = 64;

/// What sits in front of the feature extractor or the privacy attack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Raw,
    Anon,
    Baseline(Transform),
}

impl Method {
    /// Raw, the learned anonymizer, then every baseline transform.
    pub fn all() -> Vec<Method> {
        let mut v = vec![Method::Raw, Method::Anon];
        v.extend(Transform::ALL.into_iter().filter(|t| *t != Transform::Raw).map(Method::Baseline));
        v
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Method::Raw),
            "anon" => Ok(Method::Anon),
            other => Transform::parse(other).map(Method::Baseline).map_err(|_| {
                let names: Vec<String> = Method::all().iter().map(|m| m.to_string()).collect();
                Error::Config(format!("unknown method `{other}` (expected one of {})", names.join(", ")))
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Anon => "anon",
            Method::Baseline(t) => t.name(),
        }
    }

    fn extract_flag(self) -> String {
        match self {
            Method::Raw => "--raw".into(),
            Method::Anon => "--anon".into(),
            Method::Baseline(t) => format!("--baseline {}", t.name()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn record(metric: &str, value: f64, dataset: &str, hash: &str) -> MetricRecord {
    MetricRecord {
        metric: metric.into(),
        value,
        dataset: dataset.into(),
        checkpoint_hash: hash.into(),
    }
}

/// Value of `metric` in a metric file.
pub fn metric_value(records: &[MetricRecord], metric: &str, path: &Path) -> Result<f64> {
    records
        .iter()
        .find(|r| r.metric == metric)
        .map(|r| r.value)
        .ok_or_else(|| Error::format(path, format!("no `{metric}` record")))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stack_images(ds: &PrivacyDataset) -> Result<Tensor<f32>> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("privacy dataset is empty".into()));
    }
    Ok(Tensor::stack(&ds.images.iter().map(|i| i.image.clone()).collect::<Vec<_>>()))
}

/// Mean test prevalence over the attributes that appear at all: the cMAP of
/// an attacker that has learned nothing.
fn prior_cmap(labels: &[Vec<bool>]) -> f64 {
    let a = labels.first().map_or(0, Vec::len);
    let rates: Vec<f64> = (0..a)
        .map(|k| labels.iter().filter(|r| r[k]).count() as f64 / labels.len() as f64)
        .filter(|&p| p > 0.0)
        .collect();
    rates.iter().sum::<f64>() / rates.len().max(1) as f64
}

pub struct Pipeline {
    pub cfg: RunConfig,
    run_dir: PathBuf,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        Self {
            run_dir: cfg.output_dir.clone(),
            config_hash: cfg.hash(),
            cfg,
        }
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn file_key(stage: &str) -> String {
        stage.replace('/', "__")
    }

    pub fn metrics_path(&self, stage: &str) -> PathBuf {
        self.run_dir.join("metrics").join(format!("{}.json", Self::file_key(stage)))
    }

    fn log_path(&self, stage: &str) -> PathBuf {
        self.run_dir.join("logs").join(format!("{}.jsonl", Self::file_key(stage)))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.run_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir.join("reports")
    }

    fn features_dir(&self, method: Method) -> PathBuf {
        self.run_dir.join("features").join(method.name())
    }

    fn split_dir(&self, split: &str) -> PathBuf {
        self.cfg.data_root().join(split)
    }

    /// Fresh manifest of `stage`, or why it cannot be used.
    fn require(&self, stage: &str, command: &str) -> Result<StageManifest> {
        let path = manifest_path(&self.run_dir, stage);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: command.into(),
            });
        }
        let m = StageManifest::read(&path)?;
        if m.config_hash != self.config_hash {
            return Err(Error::StaleArtifact {
                path,
                producer: command.into(),
                detail: "produced under a different configuration".into(),
            });
        }
        m.verify_outputs(&self.run_dir)?;
        for (up, digest) in &m.inputs {
            let current = StageManifest::read(&manifest_path(&self.run_dir, up)).ok();
            if current.map(|c| c.digest) != Some(digest.clone()) {
                return Err(Error::StaleArtifact {
                    path,
                    producer: command.into(),
                    detail: format!("upstream stage `{up}` changed since it ran"),
                });
            }
        }
        Ok(m)
    }

    fn finish(&self, stage: &str, command: &str, inputs: &[&StageManifest], outputs: &[PathBuf]) -> Result<()> {
        let m = StageManifest::new(&self.run_dir, stage, command, &self.config_hash, inputs, outputs)?;
        m.write(&self.run_dir)?;
        log::info!("{stage}: wrote {} files", m.outputs.len());
        Ok(())
    }

    fn require_data(&self) -> Result<StageManifest> {
        self.require(GEN_DATA, "privad gen-data")
    }

    fn require_anon(&self) -> Result<StageManifest> {
        self.require(TRAIN_ANON, "privad train-anon")
    }

    fn extract_stage(method: Method) -> String {
        format!("extract-features/{method}")
    }

    fn require_features(&self, method: Method) -> Result<StageManifest> {
        self.require(
            &Self::extract_stage(method),
            &format!("privad extract-features {}", method.extract_flag()),
        )
    }

    fn require_head(&self, method: Method) -> Result<StageManifest> {
        self.require(&format!("train-ad/{method}"), &format!("privad train-ad --features {method}"))
    }

    fn videos(&self, split: &str) -> Result<VideoDataset> {
        read_video_dataset(&self.split_dir(split))
    }

    fn images(&self, split: &str) -> Result<PrivacyDataset> {
        read_privacy_dataset(&self.split_dir(split))
    }

    fn load<M: Model<f32>>(&self, mut model: M, name: &str) -> Result<M> {
        checkpoint::load_into(&mut model, &self.checkpoint_path(name))?;
        Ok(model)
    }

    fn save<M: Model<f32>>(&self, model: &M, name: &str, step: u64, outputs: &mut Vec<PathBuf>) -> Result<String> {
        let path = self.checkpoint_path(name);
        let hash = checkpoint::save(model, &path, step)?;
        outputs.push(checkpoint::manifest_path(&path));
        outputs.push(path);
        Ok(hash)
    }

    fn checkpoint_hash(&self, name: &str) -> Result<String> {
        Ok(read_manifest(&self.checkpoint_path(name))?.content_hash)
    }

    fn fresh_anonymizer(&self) -> Anonymizer<f32> {
        Anonymizer::new(self.cfg.models.anonymizer.clone(), &mut self.cfg.train.rng("init/anonymizer"))
    }

    fn fresh_utility(&self) -> UtilityEncoder<f32> {
        UtilityEncoder::new(self.cfg.models.utility.clone(), &mut self.cfg.train.rng("init/utility"))
    }

    fn fresh_budget(&self) -> BudgetEncoder<f32> {
        BudgetEncoder::new(self.cfg.models.budget.clone(), &mut self.cfg.train.rng("init/budget"))
    }

    fn fresh_head(&self) -> AnomalyHead<f32> {
        AnomalyHead::new(self.cfg.models.anomaly_head.clone(), &mut self.cfg.train.rng("init/anomaly_head"))
    }

    fn write_log(&self, stage: &str, log: &TrainLog, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.log_path(stage);
        log.write(&path)?;
        outputs.push(path);
        Ok(())
    }

    fn write_stage_metrics(&self, stage: &str, records: &[MetricRecord], outputs: &mut Vec<PathBuf>) -> Result<()> {
        let path = self.metrics_path(stage);
        write_metrics(&path, records)?;
        outputs.push(path);
        Ok(())
    }

    /// Renders (or, for a directory source, validates) every split.
    pub fn gen_data(&self) -> Result<()> {
        let d = &self.cfg.data;
        let dirs: Vec<PathBuf> = SPLITS.iter().map(|s| self.split_dir(s)).collect();
        match d.source {
            DataSource::Synthetic => {
                let action_test = ActionConfig {
                    videos_per_class: d.action_test_videos_per_class,
                    ..d.action.clone()
                };
                for (split, cfg) in [(ACTION_TRAIN, &d.action), (ACTION_TEST, &action_test)] {
                    let ds = generate_toy_action_dataset(cfg, self.cfg.split_seed(split))?;
                    reset_dir(&self.split_dir(split))?;
                    write_video_dataset(&self.split_dir(split), &ds)?;
                }
                let privacy_test = PrivacyConfig {
                    images: d.privacy_test_images,
                    ..d.privacy.clone()
                };
                for (split, cfg) in [(PRIVACY_TRAIN, &d.privacy), (PRIVACY_TEST, &privacy_test)] {
                    let ds = generate_toy_privacy_dataset(cfg, self.cfg.split_seed(split))?;
                    reset_dir(&self.split_dir(split))?;
                    write_privacy_dataset(&self.split_dir(split), &ds)?;
                }
                let sized = |n: usize| AnomalyConfig {
                    normal_videos: n,
                    anomalous_videos: n,
                    ..d.anomaly.clone()
                };
                let (val, test) = (sized(d.anomaly_val_videos), sized(d.anomaly_test_videos));
                for (split, cfg) in [(ANOMALY_TRAIN, &d.anomaly), (ANOMALY_VAL, &val), (ANOMALY_TEST, &test)] {
                    let ds = generate_toy_anomaly_dataset(cfg, self.cfg.split_seed(split))?;
                    reset_dir(&self.split_dir(split))?;
                    write_video_dataset(&self.split_dir(split), &ds)?;
                }
            }
            DataSource::Directory => self.validate_data_dir()?,
        }
        self.finish(GEN_DATA, "privad gen-data", &[], &dirs)
    }

    fn validate_data_dir(&self) -> Result<()> {
        let res = self.cfg.resolution;
        for split in SPLITS {
            let dir = self.split_dir(split);
            if !dir.exists() {
                return Err(Error::Dataset(format!("data source is a directory but {} is missing", dir.display())));
            }
            if split.starts_with("privacy") {
                let ds = self.images(split)?;
                if ds.attributes != self.cfg.models.probe.attributes {
                    return Err(Error::Dataset(format!(
                        "{split} has {} attributes, the configuration expects {}",
                        ds.attributes, self.cfg.models.probe.attributes
                    )));
                }
                if let Some(img) = ds.images.first() {
                    if img.image.shape()[1..] != [res, res] {
                        return Err(Error::Dataset(format!("{split} images are not {res}x{res}")));
                    }
                }
                continue;
            }
            let ds = self.videos(split)?;
            let expected = if split.starts_with("action") {
                DatasetKind::Action
            } else {
                DatasetKind::Anomaly
            };
            if ds.kind != expected {
                return Err(Error::Dataset(format!("{split} holds a {:?} dataset", ds.kind)));
            }
            if let Some((_, _, h, w)) = ds.dims() {
                if (h, w) != (res, res) {
                    return Err(Error::Dataset(format!("{split} frames are {h}x{w}, expected {res}x{res}")));
                }
            }
            if expected == DatasetKind::Action && ds.class_count != self.cfg.data.action.classes {
                return Err(Error::Dataset(format!(
                    "{split} has {} classes, data.action.classes is {}",
                    ds.class_count, self.cfg.data.action.classes
                )));
            }
        }
        Ok(())
    }

    /// Identity pretraining of the anonymizer.
    pub fn pretrain_anon(&self) -> Result<Vec<MetricRecord>> {
        let data = self.require_data()?;
        let ds = self.videos(ACTION_TRAIN)?;
        let mut fa = self.fresh_anonymizer();
        let mut log = TrainLog::new();
        let r = pretrain_identity(&mut fa, &ds, &self.cfg.train, &mut log)?;
        let mut outputs = Vec::new();
        let hash = self.save(&fa, "anonymizer_pretrained", r.epochs as u64, &mut outputs)?;
        let mut records = vec![
            record("heldout_l1", r.heldout_l1, "action_train_heldout", &hash),
            record("train_l1", r.final_train_l1, ACTION_TRAIN, &hash),
        ];
        if let Some(e) = r.reached_at_epoch {
            records.push(record("threshold_epoch", e as f64, "action_train_heldout", &hash));
        }
        self.write_log(PRETRAIN, &log, &mut outputs)?;
        self.write_stage_metrics(PRETRAIN, &records, &mut outputs)?;
        self.finish(PRETRAIN, "privad pretrain-anon", &[&data], &outputs)?;
        Ok(records)
    }

    /// Encoder initialization followed by the minimax.
    pub fn train_anon(&self) -> Result<Vec<MetricRecord>> {
        let data = self.require_data()?;
        let pre = self.require(PRETRAIN, "privad pretrain-anon")?;
        let train = self.videos(ACTION_TRAIN)?;
        let test = self.videos(ACTION_TEST)?;
        let mut fa = self.load(self.fresh_anonymizer(), "anonymizer_pretrained")?;
        let mut ft = self.fresh_utility();
        let mut fb = self.fresh_budget();
        let mut log = TrainLog::new();
        let mut outputs = Vec::new();

        let init = init_encoders(&mut ft, &mut fb, &train, &self.cfg.train, &mut log)?;
        let ft_hash = self.save(&ft, "utility_init", 0, &mut outputs)?;
        let fb_hash = self.save(&fb, "budget_init", 0, &mut outputs)?;
        let ft_init = ft.clone();

        let r = train_anonymization(&mut fa, &mut ft, &mut fb, &train, &self.cfg.train, &mut log)?;
        let step = r.iterations as u64;
        let fa_hash = self.save(&fa, "anonymizer", step, &mut outputs)?;
        let ft_anon_hash = self.save(&ft, "utility", step, &mut outputs)?;
        let fb_anon_hash = self.save(&fb, "budget", step, &mut outputs)?;

        let clips = self.cfg.eval.clips_per_video;
        let (pos, neg) = budget_separation(Some(&fa), &fb, &test)?;
        let records = vec![
            record("init_utility_accuracy", init.utility_accuracy, ACTION_TRAIN, &ft_hash),
            record("init_budget_positive_similarity", init.budget_positive_similarity, ACTION_TRAIN, &fb_hash),
            record("init_budget_negative_similarity", init.budget_negative_similarity, ACTION_TRAIN, &fb_hash),
            record("action_accuracy_raw", action_accuracy(None, &ft_init, &test)?, ACTION_TEST, &ft_hash),
            record("action_accuracy_anon", action_accuracy(Some(&fa), &ft, &test)?, ACTION_TEST, &fa_hash),
            record(
                "intra_video_distance_raw",
                intra_video_distance(None, &ft_init, &test, clips)?,
                ACTION_TEST,
                &ft_hash,
            ),
            record(
                "intra_video_distance_anon",
                intra_video_distance(Some(&fa), &ft, &test, clips)?,
                ACTION_TEST,
                &ft_anon_hash,
            ),
            record("budget_positive_similarity", pos, ACTION_TEST, &fb_anon_hash),
            record("budget_negative_similarity", neg, ACTION_TEST, &fb_anon_hash),
            record("selected_epoch", r.selected_epoch as f64, ACTION_TRAIN, &fa_hash),
        ];
        self.write_log(TRAIN_ANON, &log, &mut outputs)?;
        self.write_stage_metrics(TRAIN_ANON, &records, &mut outputs)?;
        self.finish(TRAIN_ANON, "privad train-anon", &[&data, &pre], &outputs)?;
        Ok(records)
    }

    /// Raw and baseline features go through the initial `f_T`; anonymized
    /// features through the jointly trained `f_A` and `f_T`.
    fn utility_for(&self, method: Method) -> Result<UtilityEncoder<f32>> {
        let name = if method == Method::Anon { "utility" } else { "utility_init" };
        self.load(self.fresh_utility(), name)
    }

    /// Per-segment features of every anomaly split.
    pub fn extract_features(&self, method: Method) -> Result<()> {
        let data = self.require_data()?;
        let anon = self.require_anon()?;
        let ft = self.utility_for(method)?;
        let fa = match method {
            Method::Anon => Some(self.load(self.fresh_anonymizer(), "anonymizer")?),
            _ => None,
        };
        let mode = match (method, &fa) {
            (Method::Anon, Some(fa)) => FeatureMode::Anonymized(fa),
            (Method::Baseline(t), _) => FeatureMode::Baseline(t),
            _ => FeatureMode::Raw,
        };
        let out = self.features_dir(method);
        reset_dir(&out)?;
        for split in ANOMALY_SPLITS {
            let ds = self.videos(split)?;
            let feats = extract_features(mode, &ft, &ds)?;
            let dir = out.join(split);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_feature_dir(&dir, &feats)?;
        }
        let stage = Self::extract_stage(method);
        let command = format!("privad extract-features {}", method.extract_flag());
        self.finish(&stage, &command, &[&data, &anon], &[out])
    }

    fn feature_set(&self, method: Method, split: &str) -> Result<FeatureSet> {
        let ds = self.videos(split)?;
        let ids = ds.videos.iter().filter(|v| v.num_frames() >= CLIP_LENGTH).map(|v| v.id.as_str());
        let feats = read_feature_dir(&self.features_dir(method).join(split), ids)?;
        FeatureSet::join(&feats, &ds)
    }

    /// Anomaly head on one method's features, early-stopped on validation AUC.
    pub fn train_ad(&self, method: Method) -> Result<Vec<MetricRecord>> {
        let feats = self.require_features(method)?;
        let train = self.feature_set(method, ANOMALY_TRAIN)?;
        let val = self.feature_set(method, ANOMALY_VAL)?;
        let mut head = self.fresh_head();
        let mut log = TrainLog::new();
        let r = train_anomaly_detector(&mut head, &train, Some(&val), &self.cfg.train, &mut log)?;
        let stage = format!("train-ad/{method}");
        let mut outputs = Vec::new();
        let hash = self.save(&head, &format!("anomaly_head_{method}"), r.steps as u64, &mut outputs)?;
        let mut records = vec![
            record("best_epoch", r.best_epoch as f64, ANOMALY_VAL, &hash),
            record("epochs_run", r.epochs_run as f64, ANOMALY_TRAIN, &hash),
        ];
        if let Some(auc) = r.best_val_auc {
            records.push(record("val_frame_auc", auc, ANOMALY_VAL, &hash));
        }
        self.write_log(&stage, &log, &mut outputs)?;
        self.write_stage_metrics(&stage, &records, &mut outputs)?;
        self.finish(&stage, &format!("privad train-ad --features {method}"), &[&feats], &outputs)?;
        Ok(records)
    }

    /// Frame-level AUC and AP on the anomaly test split.
    pub fn eval_ad(&self, method: Method) -> Result<Vec<MetricRecord>> {
        let head_m = self.require_head(method)?;
        let feats = self.require_features(method)?;
        let name = format!("anomaly_head_{method}");
        let head = self.load(self.fresh_head(), &name)?;
        let hash = self.checkpoint_hash(&name)?;
        let test = self.feature_set(method, ANOMALY_TEST)?;
        let records = vec![
            record("frame_auc", test.frame_auc(&head)?, ANOMALY_TEST, &hash),
            record("frame_ap", test.frame_ap(&head)?, ANOMALY_TEST, &hash),
        ];
        let stage = format!("eval-ad/{method}");
        let mut outputs = Vec::new();
        self.write_stage_metrics(&stage, &records, &mut outputs)?;
        self.finish(&stage, &format!("privad eval-ad --features {method}"), &[&head_m, &feats], &outputs)?;
        Ok(records)
    }

    fn privacy_inputs(&self, method: Method, fa: Option<&Anonymizer<f32>>, ds: &PrivacyDataset) -> Result<Tensor<f32>> {
        let x = stack_images(ds)?;
        match method {
            Method::Raw => Ok(x),
            Method::Anon => anonymize_chunked(fa.expect("anonymizer loaded for anon"), &x, ANON_CHUNK),
            Method::Baseline(t) => {
                let images = ds
                    .images
                    .iter()
                    .map(|img| {
                        let boxes = ToyBoxProvider::constant(img.boxes.clone());
                        let shape = img.image.shape().to_vec();
                        let one = img.image.clone().reshape(&[1, shape[0], shape[1], shape[2]]);
                        Ok(t.apply(&one, &boxes)?.reshape(&shape))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::stack(&images))
            }
        }
    }

    /// Trains a fresh attribute attack on transformed training images and
    /// reports its cMAP on the transformed test images.
    pub fn eval_privacy(&self, method: Method) -> Result<Vec<MetricRecord>> {
        let mut inputs = vec![self.require_data()?];
        let fa = if method == Method::Anon {
            inputs.push(self.require_anon()?);
            Some(self.load(self.fresh_anonymizer(), "anonymizer")?)
        } else {
            None
        };
        let train = self.images(PRIVACY_TRAIN)?;
        let test = self.images(PRIVACY_TEST)?;
        let xtr = self.privacy_inputs(method, fa.as_ref(), &train)?;
        let xte = self.privacy_inputs(method, fa.as_ref(), &test)?;
        let (ytr, yte) = (train.label_matrix(), test.label_matrix());
        let mut log = TrainLog::new();
        let (model, rep) = train_privacy_attack(&self.cfg.models.attack, &xtr, &ytr, &self.cfg.train, &mut log)?;
        let result = attack_cmap(&model, &xte, &yte)?;
        let stage = format!("eval-privacy/{method}");
        let mut outputs = Vec::new();
        let hash = self.save(&model, &format!("attack_{method}"), rep.epochs as u64, &mut outputs)?;
        let mut records = vec![
            record("cmap", result.value, PRIVACY_TEST, &hash),
            record("prior_cmap", prior_cmap(&yte), PRIVACY_TEST, &hash),
        ];
        for (k, ap) in result.per_class.iter().enumerate() {
            if let Some(ap) = ap {
                records.push(record(&format!("ap_{k}"), *ap, PRIVACY_TEST, &hash));
            }
        }
        self.write_log(&stage, &log, &mut outputs)?;
        self.write_stage_metrics(&stage, &records, &mut outputs)?;
        let refs: Vec<&StageManifest> = inputs.iter().collect();
        self.finish(&stage, &format!("privad eval-privacy --transform {method}"), &refs, &outputs)?;
        Ok(records)
    }

    /// Attribute probes on `f_T` features of raw and of anonymized images.
    pub fn probe_features(&self) -> Result<Vec<MetricRecord>> {
        let data = self.require_data()?;
        let anon = self.require_anon()?;
        let ft_init = self.utility_for(Method::Raw)?;
        let ft = self.utility_for(Method::Anon)?;
        let fa = self.load(self.fresh_anonymizer(), "anonymizer")?;
        let train = self.images(PRIVACY_TRAIN)?;
        let test = self.images(PRIVACY_TEST)?;
        let (xtr, xte) = (stack_images(&train)?, stack_images(&test)?);
        let (ytr, yte) = (train.label_matrix(), test.label_matrix());
        let mut log = TrainLog::new();
        let mut outputs = Vec::new();
        let mut records = Vec::new();
        for (method, fa, ft) in [(Method::Raw, None, &ft_init), (Method::Anon, Some(&fa), &ft)] {
            let (probe, rep): (PrivacyProbe<f32>, _) = train_feature_probe(
                &self.cfg.models.probe,
                fa,
                ft,
                (&xtr, &ytr),
                (&xte, &yte),
                &self.cfg.train,
                &mut log,
            )?;
            let hash = self.save(&probe, &format!("probe_{method}"), 0, &mut outputs)?;
            records.push(record(&format!("probe_cmap_{method}"), rep.cmap.value, PRIVACY_TEST, &hash));
        }
        self.write_log(PROBE, &log, &mut outputs)?;
        self.write_stage_metrics(PROBE, &records, &mut outputs)?;
        self.finish(PROBE, "privad probe-features", &[&data, &anon], &outputs)?;
        Ok(records)
    }

    /// Trade-off table over every method with both a privacy and an anomaly
    /// evaluation; the raw baseline is required.
    pub fn report(&self) -> Result<TradeoffReport> {
        let mut results = Vec::new();
        let mut inputs = Vec::new();
        for method in Method::all() {
            let p_stage = format!("eval-privacy/{method}");
            let a_stage = format!("eval-ad/{method}");
            let p_cmd = format!("privad eval-privacy --transform {method}");
            let a_cmd = format!("privad eval-ad --features {method}");
            let have = |s: &str| manifest_path(&self.run_dir, s).exists();
            if method != Method::Raw && !(have(&p_stage) && have(&a_stage)) {
                continue;
            }
            let pm = self.require(&p_stage, &p_cmd)?;
            let am = self.require(&a_stage, &a_cmd)?;
            let (pp, ap) = (self.metrics_path(&p_stage), self.metrics_path(&a_stage));
            results.push(MethodResult {
                method: method.name().into(),
                cmap: metric_value(&read_metrics(&pp)?, "cmap", &pp)?,
                utility: metric_value(&read_metrics(&ap)?, "frame_auc", &ap)?,
            });
            inputs.push(pm);
            inputs.push(am);
        }
        let report = build_tradeoff_report(&results, "frame_auc")?;
        let dir = self.report_dir();
        reset_dir(&dir)?;
        report.write(&dir)?;
        let refs: Vec<&StageManifest> = inputs.iter().collect();
        self.finish(REPORT, "privad report", &refs, &[dir])?;
        Ok(report)
    }

    /// Per-frame score trace of one video, with the raw-feature trace
    /// overlaid when a raw head exists. Returns the CSV and SVG paths.
    pub fn plot_scores(&self, video_id: &str, method: Method) -> Result<(PathBuf, PathBuf)> {
        let head_m = self.require_head(method)?;
        let feats = self.require_features(method)?;
        let mut inputs = vec![head_m, feats];
        let mut found = None;
        for split in [ANOMALY_TEST, ANOMALY_VAL, ANOMALY_TRAIN] {
            let ds = self.videos(split)?;
            if ds.videos.iter().any(|v| v.id == video_id) {
                found = Some(split);
                break;
            }
        }
        let split = found.ok_or_else(|| Error::Dataset(format!("no anomaly video with id `{video_id}`")))?;
        let lookup = |m: Method| -> Result<Vec<f64>> {
            let set = self.feature_set(m, split)?;
            let item = set
                .items
                .iter()
                .find(|i| i.video_id == video_id)
                .ok_or_else(|| Error::Dataset(format!("video `{video_id}` is shorter than one clip")))?;
            let head = self.load(self.fresh_head(), &format!("anomaly_head_{m}"))?;
            score_video(&head, item)
        };
        let set = self.feature_set(method, split)?;
        let item = set
            .items
            .iter()
            .find(|i| i.video_id == video_id)
            .ok_or_else(|| Error::Dataset(format!("video `{video_id}` is shorter than one clip")))?;
        let truth = item.frame_mask.clone().unwrap_or_else(|| vec![false; item.frames]);
        let trace = AnomalyScoreTrace::new(lookup(method)?, truth)?;
        let raw_stage = "train-ad/raw";
        let raw = if method != Method::Raw && manifest_path(&self.run_dir, raw_stage).exists() {
            inputs.push(self.require_head(Method::Raw)?);
            inputs.push(self.require_features(Method::Raw)?);
            Some(lookup(Method::Raw)?)
        } else {
            None
        };
        let plots = self.run_dir.join("plots");
        let csv = plots.join(format!("{video_id}_{method}.csv"));
        let svg = plots.join(format!("{video_id}_{method}.svg"));
        plot_score_trace(&csv, &trace, raw.as_deref())?;
        privad::binio::write_file(&svg, render_score_svg(&trace, raw.as_deref()).as_bytes())?;
        let refs: Vec<&StageManifest> = inputs.iter().collect();
        let stage = format!("plot-scores/{method}/{video_id}");
        let command = format!("privad plot-scores {video_id} --features {method}");
        self.finish(&stage, &command, &refs, &[csv.clone(), svg.clone()])?;
        Ok((csv, svg))
    }

    /// Every stage in order, for `methods` (raw is always included).
    pub fn run_all(&self, methods: &[Method]) -> Result<TradeoffReport> {
        let mut methods = methods.to_vec();
        if !methods.contains(&Method::Raw) {
            methods.insert(0, Method::Raw);
        }
        self.gen_data()?;
        self.pretrain_anon()?;
        self.train_anon()?;
        for &m in &methods {
            self.extract_features(m)?;
            self.train_ad(m)?;
            self.eval_ad(m)?;
            self.eval_privacy(m)?;
        }
        if methods.contains(&Method::Anon) {
            self.probe_features()?;
        }
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::all().len(), 7);
        assert!(matches!(Method::parse("sepia"), Err(Error::Config(_))));
    }

    #[test]
    fn prior_is_mean_prevalence_of_present_attributes() {
        let y = vec![vec![true, false, false], vec![false, false, true], vec![true, false, false], vec![false, false, false]];
        assert!((prior_cmap(&y) - 0.375).abs() < 1e-12);
    }
}
