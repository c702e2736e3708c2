use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use super::features::FeatureSequence;
use super::{finite, TrainConfig, TrainLog};
use crate::data::synth::VideoDataset;
use crate::data::CLIP_LENGTH;
use crate::error::{Error, Result};
use crate::evaluation::{frame_level_ap, frame_level_auc, segments_to_frames, AnomalyScoreTrace};
use crate::graph::Graph;
use crate::losses::mgfn_total;
use crate::models::AnomalyHead;
use crate::nn::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFeatures {
    pub video_id: String,
    /// `[S, C]`.
    pub features: Tensor<f32>,
    pub anomalous: bool,
    pub frames: usize,
    /// Frame-level truth; only evaluation reads it.
    pub frame_mask: Option<Vec<bool>>,
}

/// Feature sequences joined with their videos' labels.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSet {
    pub items: Vec<LabeledFeatures>,
}

impl FeatureSet {
    /// Pairs each video of `ds` with its feature sequence, in dataset order.
    pub fn join(features: &BTreeMap<String, FeatureSequence>, ds: &VideoDataset) -> Result<Self> {
        let mut items = Vec::with_capacity(ds.len());
        for v in &ds.videos {
            let Some(seq) = features.get(&v.id) else {
                log::warn!("no features for video `{}`; left out", v.id);
                continue;
            };
            items.push(LabeledFeatures {
                video_id: v.id.clone(),
                features: seq.features.clone(),
                anomalous: v.label == 1,
                frames: v.num_frames(),
                frame_mask: v.frame_mask.clone(),
            });
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Per-frame score traces with ground truth. Normal videos without a
    /// mask count as all-normal.
    pub fn traces(&self, head: &AnomalyHead<f32>) -> Result<Vec<AnomalyScoreTrace>> {
        self.items
            .iter()
            .map(|item| {
                let truth = match (&item.frame_mask, item.anomalous) {
                    (Some(m), _) => m.clone(),
                    (None, false) => vec![false; item.frames],
                    (None, true) => {
                        return Err(Error::Dataset(format!("anomalous video `{}` has no frame mask", item.video_id)))
                    }
                };
                AnomalyScoreTrace::new(score_video(head, item)?, truth)
            })
            .collect()
    }

    pub fn frame_auc(&self, head: &AnomalyHead<f32>) -> Result<f64> {
        frame_level_auc(&self.traces(head)?)
    }

    pub fn frame_ap(&self, head: &AnomalyHead<f32>) -> Result<f64> {
        frame_level_ap(&self.traces(head)?)
    }
}

/// Per-frame anomaly scores of one video.
pub fn score_video(head: &AnomalyHead<f32>, item: &LabeledFeatures) -> Result<Vec<f64>> {
    let (scores, _) = head.score_segments(&item.features)?;
    let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
    segments_to_frames(&scores, CLIP_LENGTH, item.frames)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdReport {
    pub steps: usize,
    pub epochs_run: usize,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
}

/// Trains the anomaly head with balanced batches (half normal, half
/// anomalous), input-feature dropout and the weakly supervised objective.
/// With a validation set the head is early-stopped on frame-level AUC and
/// the best epoch's weights are kept.
pub fn train_anomaly_detector(
    head: &mut AnomalyHead<f32>,
    train: &FeatureSet,
    val: Option<&FeatureSet>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<AdReport> {
    const STAGE: &str = "train_anomaly_detector";
    let started = Instant::now();
    let normal: Vec<usize> = (0..train.len()).filter(|&i| !train.items[i].anomalous).collect();
    let anomalous: Vec<usize> = (0..train.len()).filter(|&i| train.items[i].anomalous).collect();
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::Dataset(format!(
            "anomaly training needs both classes, got {} normal and {} anomalous videos",
            normal.len(),
            anomalous.len()
        )));
    }
    let mut rng = cfg.rng(STAGE);
    let mut opt = Adam::new(cfg.lr_ad, cfg.ad_weight_decay);
    let half = cfg.ad_batch / 2;
    let steps_per_epoch = train.len().div_ceil(cfg.ad_batch);
    let keep = 1.0 - cfg.ad_dropout;
    let mut step = 0;
    let mut best: Option<(f64, usize, crate::nn::ParamStore<f32>)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.ad_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let mut picks: Vec<usize> = (0..half).map(|_| normal[rng.random_range(0..normal.len())]).collect();
            picks.extend((0..half).map(|_| anomalous[rng.random_range(0..anomalous.len())]));
            let labels: Vec<bool> = picks.iter().map(|&i| train.items[i].anomalous).collect();
            let s = picks.iter().map(|&i| train.items[i].features.shape()[0]).min().unwrap_or(0);
            let c = train.items[picks[0]].features.shape()[1];
            let mut data = Vec::with_capacity(picks.len() * s * c);
            for &i in &picks {
                data.extend_from_slice(&train.items[i].features.data()[..s * c]);
            }
            let x = Tensor::from_vec(&[picks.len(), s, c], data);
            let mask: Vec<f32> = (0..x.len())
                .map(|_| if rng.random_bool(keep) { (1.0 / keep) as f32 } else { 0.0 })
                .collect();
            let g = Graph::new();
            let p = head.params.bind(&g, true);
            let out = head.forward(&g, &p, g.constant(x), Some(g.constant(Tensor::from_vec(&[picks.len(), s, c], mask))));
            let l = mgfn_total(&g, out.scores, out.magnitudes, &labels, &cfg.loss)?;
            let total = finite(STAGE, step, "total", g.item(l.total) as f64)?;
            let lc = &cfg.loss;
            let mc = l.mc.map(|v| g.item(v) as f64).unwrap_or(0.0);
            let record = [
                ("total", total),
                ("sce", g.item(l.sce) as f64),
                ("smooth", lc.lambda_smooth * g.item(l.smooth) as f64),
                ("sparse", lc.lambda_sparse * g.item(l.sparse) as f64),
                ("mc", lc.lambda_mc * mc),
            ];
            let mut grads = g.backward(l.total);
            let gmap = head.params.grads(&p, &mut grads);
            drop(g);
            opt.step(&mut head.params, &gmap);
            log.step(STAGE, epoch, step, &record);
            epoch_loss += total;
            step += 1;
        }
        epochs_run = epoch + 1;
        let mean_loss = epoch_loss / steps_per_epoch as f64;
        match val {
            Some(v) => {
                let auc = v.frame_auc(head)?;
                log.epoch(STAGE, epoch, &[("loss", mean_loss), ("val_auc", auc)]);
                if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                    best = Some((auc, epoch + 1, head.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.ad_patience {
                        break;
                    }
                }
            }
            None => log.epoch(STAGE, epoch, &[("loss", mean_loss)]),
        }
    }
    let (best_val_auc, best_epoch) = match best {
        Some((auc, epoch, params)) => {
            head.params = params;
            (Some(auc), epoch)
        }
        None => (None, epochs_run),
    };
    log.add_time(STAGE, started.elapsed().as_secs_f64());
    Ok(AdReport {
        steps: step,
        epochs_run,
        best_epoch,
        best_val_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AnomalyHeadConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(n: usize, shift: f32, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..n)
            .map(|i| {
                let anomalous = i % 2 == 1;
                let mask: Vec<bool> = (0..64).map(|t| anomalous && (16..40).contains(&t)).collect();
                let data: Vec<f32> = (0..4 * 6)
                    .map(|k| {
                        let seg = k / 6;
                        let hot = anomalous && (1..3).contains(&seg);
                        rng.random_range(0.0..0.2) + if hot { shift } else { 0.0 }
                    })
                    .collect();
                LabeledFeatures {
                    video_id: format!("v{i}"),
                    features: Tensor::from_vec(&[4, 6], data),
                    anomalous,
                    frames: 64,
                    frame_mask: Some(mask),
                }
            })
            .collect();
        FeatureSet { items }
    }

    fn head() -> AnomalyHead<f32> {
        let cfg = AnomalyHeadConfig {
            feature_dim: 6,
            hidden: 8,
            ..AnomalyHeadConfig::default()
        };
        AnomalyHead::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn learns_separable_segments_and_logs_components() {
        let train = set(16, 1.0, 1);
        let val = set(8, 1.0, 2);
        let mut cfg = TrainConfig::new(4);
        cfg.ad_epochs = 60;
        cfg.ad_batch = 8;
        cfg.ad_patience = 20;
        cfg.ad_dropout = 0.0;
        let mut h = head();
        let mut log = TrainLog::new();
        let r = train_anomaly_detector(&mut h, &train, Some(&val), &cfg, &mut log).unwrap();
        assert!(r.best_val_auc.unwrap() > 0.9, "{r:?}");
        assert_eq!(val.frame_auc(&h).unwrap(), r.best_val_auc.unwrap());
        assert!(log.steps(STAGE_NAME).all(|s| s.values().all(|v| v.is_finite())));
        assert_eq!(log.steps(STAGE_NAME).count(), r.steps);
    }

    const STAGE_NAME: &str = "train_anomaly_detector";

    #[test]
    fn zero_mc_weight_logs_zero_and_single_class_fails() {
        let train = set(8, 1.0, 3);
        let mut cfg = TrainConfig::new(4);
        cfg.ad_epochs = 2;
        cfg.ad_batch = 4;
        cfg.loss.lambda_mc = 0.0;
        let mut log = TrainLog::new();
        train_anomaly_detector(&mut head(), &train, None, &cfg, &mut log).unwrap();
        assert!(log.steps(STAGE_NAME).all(|s| s["mc"] == 0.0));

        let only_normal = FeatureSet {
            items: train.items.iter().filter(|i| !i.anomalous).cloned().collect(),
        };
        assert!(matches!(
            train_anomaly_detector(&mut head(), &only_normal, None, &cfg, &mut log),
            Err(Error::Dataset(_))
        ));
    }
}
