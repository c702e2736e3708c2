use std::time::Instant;

use rand::seq::SliceRandom;

use super::anon::{anonymize_chunked, encode_clips};
use super::{finite, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::evaluation::{cmap, CmapResult};
use crate::graph::{Graph, Var};
use crate::losses::sigmoid_ce;
use crate::models::{Anonymizer, BudgetEncoder, BudgetEncoderConfig, PrivacyProbe, PrivacyProbeConfig, UtilityEncoder};
use crate::nn::{Adam, Bound, ParamStore};
use crate::tensor::Tensor;

const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub epochs: usize,
    pub final_lr: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub cmap: CmapResult,
    pub layer_dims: Vec<(usize, usize)>,
}

fn check_labels(n: usize, labels: &[Vec<bool>], attributes: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{what}: {n} inputs but {} label rows", labels.len())));
    }
    if let Some(r) = labels.iter().find(|r| r.len() != attributes) {
        return Err(Error::Shape(format!("{what}: label row of {} for {attributes} attributes", r.len())));
    }
    for k in 0..attributes {
        if !labels.iter().any(|r| r[k]) {
            log::warn!("{what}: attribute {k} never present in the training split; excluded from cMAP");
        }
    }
    Ok(())
}

fn rows_of(x: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    Tensor::stack(&idx.iter().map(|&i| x.index_axis0(i)).collect::<Vec<_>>())
}

fn flat_labels(labels: &[Vec<bool>], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| labels[i].iter().map(|&b| if b { 1.0 } else { 0.0 })).collect()
}

/// Multi-label sigmoid cross-entropy on `[B, A]` logits.
fn multilabel_loss(g: &Graph<f32>, logits: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    sigmoid_ce(g, g.reshape(g.sigmoid(logits), &[n]), targets)
}

/// Mini-batch training shared by the attack model and the probe. With
/// `step_down`, the rate drops to a fifth after every epoch whose mean loss
/// does not improve, and training stops once it falls to `min_lr`.
#[allow(clippy::too_many_arguments)]
fn fit(
    stage: &str,
    params: &mut ParamStore<f32>,
    forward: impl Fn(&Graph<f32>, &Bound, Var) -> Var,
    inputs: &Tensor<f32>,
    labels: &[Vec<bool>],
    (epochs, lr, batch): (usize, f64, usize),
    step_down: Option<f64>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<AttackReport> {
    let started = Instant::now();
    let mut rng = cfg.rng(stage);
    let mut opt = Adam::new(lr, 0.0);
    let n = inputs.shape()[0];
    let mut best = f64::INFINITY;
    let mut step = 0;
    let mut report = AttackReport {
        epochs: 0,
        final_lr: lr,
        final_loss: f64::NAN,
    };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(batch) {
            let g = Graph::new();
            let p = params.bind(&g, true);
            let logits = forward(&g, &p, g.constant(rows_of(inputs, idx)));
            let loss = multilabel_loss(&g, logits, &flat_labels(labels, idx))?;
            let lv = finite(stage, step, "bce", g.item(loss) as f64)?;
            let mut grads = g.backward(loss);
            let gm = params.grads(&p, &mut grads);
            drop(g);
            opt.step(params, &gm);
            log.step(stage, epoch, step, &[("bce", lv)]);
            sum += lv;
            batches += 1;
            step += 1;
        }
        let mean = sum / batches.max(1) as f64;
        log.epoch(stage, epoch, &[("bce", mean), ("lr", opt.lr)]);
        report.epochs = epoch + 1;
        report.final_loss = mean;
        if let Some(min_lr) = step_down {
            if mean < best {
                best = mean;
            } else {
                opt.lr /= 5.0;
                if opt.lr <= min_lr {
                    break;
                }
            }
        }
    }
    report.final_lr = opt.lr;
    log.add_time(stage, started.elapsed().as_secs_f64());
    Ok(report)
}

/// Trains a fresh attack model on (already transformed) images `[N, C, H, W]`.
pub fn train_privacy_attack(
    model_cfg: &BudgetEncoderConfig,
    images: &Tensor<f32>,
    labels: &[Vec<bool>],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(BudgetEncoder<f32>, AttackReport)> {
    const STAGE: &str = "train_privacy_attack";
    let attributes = model_cfg
        .outputs
        .ok_or_else(|| Error::Config("attack model needs an attribute head (outputs)".into()))?;
    let mut model = BudgetEncoder::new(model_cfg.clone(), &mut cfg.rng("privacy_attack_init"));
    model.check_input(images.shape())?;
    check_labels(images.shape()[0], labels, attributes, "privacy attack")?;
    let frozen = model.clone();
    let report = fit(
        STAGE,
        &mut model.params,
        |g, p, x| frozen.forward(g, p, x),
        images,
        labels,
        (cfg.attack_epochs, cfg.attack_lr, cfg.attack_batch),
        Some(cfg.attack_min_lr),
        cfg,
        log,
    )?;
    Ok((model, report))
}

fn sigmoid_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let a = logits.shape()[1];
    logits
        .data()
        .chunks(a)
        .map(|r| r.iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect())
        .collect()
}

/// Attribute probabilities for `[N, C, H, W]` images.
pub fn predict_attributes(model: &BudgetEncoder<f32>, images: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for s in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
        out.extend(sigmoid_rows(&model.encode(&rows_of(images, &idx))?));
    }
    Ok(out)
}

pub fn attack_cmap(model: &BudgetEncoder<f32>, images: &Tensor<f32>, labels: &[Vec<bool>]) -> Result<CmapResult> {
    cmap(&predict_attributes(model, images)?, labels)
}

/// `f_T` embeddings of images repeated `stack` times into pseudo-clips,
/// anonymized first when `fa` is given.
pub fn probe_features(
    fa: Option<&Anonymizer<f32>>,
    ft: &UtilityEncoder<f32>,
    images: &Tensor<f32>,
    stack: usize,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut feats = Vec::with_capacity(n);
    for s in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
        let mut x = rows_of(images, &idx);
        if let Some(fa) = fa {
            x = anonymize_chunked(fa, &x, CHUNK)?;
        }
        let clips: Vec<Tensor<f32>> = (0..idx.len())
            .map(|i| {
                let frame = x.index_axis0(i);
                Tensor::stack(&vec![frame; stack])
            })
            .collect();
        let (emb, _) = encode_clips(None, ft, &clips)?;
        feats.extend((0..idx.len()).map(|i| emb.index_axis0(i)));
    }
    Ok(Tensor::stack(&feats))
}

/// Trains the probe on `f_T` features of the training images and reports
/// its cMAP on the test images.
#[allow(clippy::too_many_arguments)]
pub fn train_feature_probe(
    probe_cfg: &PrivacyProbeConfig,
    fa: Option<&Anonymizer<f32>>,
    ft: &UtilityEncoder<f32>,
    (train_images, train_labels): (&Tensor<f32>, &[Vec<bool>]),
    (test_images, test_labels): (&Tensor<f32>, &[Vec<bool>]),
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(PrivacyProbe<f32>, ProbeReport)> {
    const STAGE: &str = "train_feature_probe";
    if probe_cfg.input_dim != ft.cfg.feature_dim {
        return Err(Error::Config(format!(
            "probe input_dim {} does not match utility feature_dim {}",
            probe_cfg.input_dim, ft.cfg.feature_dim
        )));
    }
    check_labels(train_images.shape()[0], train_labels, probe_cfg.attributes, "feature probe")?;
    let train = probe_features(fa, ft, train_images, cfg.probe_stack)?;
    let test = probe_features(fa, ft, test_images, cfg.probe_stack)?;
    let mut probe = PrivacyProbe::new(probe_cfg.clone(), &mut cfg.rng("feature_probe_init"));
    let frozen = probe.clone();
    fit(
        STAGE,
        &mut probe.params,
        |g, p, x| frozen.forward(g, p, x),
        &train,
        train_labels,
        (cfg.probe_epochs, cfg.probe_lr, cfg.probe_batch),
        None,
        cfg,
        log,
    )?;
    let scores = sigmoid_rows(&probe.probe_attributes(&test)?);
    let report = ProbeReport {
        cmap: cmap(&scores, test_labels)?,
        layer_dims: probe.layer_dims(),
    };
    Ok((probe, report))
}
