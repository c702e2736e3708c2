use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{finite, CheckpointSelection, TrainConfig, TrainLog};
use crate::data::synth::{DatasetKind, VideoDataset};
use crate::data::{
    augment_clip, sample_clip, sample_triplet, AugmentationParams, ClipSpec, NegativeDistance, Video, CLIP_LENGTH,
    SKIP_RATE,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    budget_nt_xent, cross_entropy, invariance_nt_xent, l1_reconstruction, triplet_distinct, utility_loss, TemporalObjective,
};
use crate::models::{Anonymizer, BudgetEncoder, UtilityEncoder};
use crate::nn::{Adam, Bound, ParamStore};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_train_l1: f64,
    /// Mean per-pixel `|f_A(x) - x|` on held-out frames after the last epoch.
    pub heldout_l1: f64,
    /// First epoch (1-based) whose held-out L1 was below the threshold.
    pub reached_at_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub utility_accuracy: f64,
    pub budget_positive_similarity: f64,
    pub budget_negative_similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnonReport {
    pub iterations: usize,
    /// 1-based epoch whose weights were kept.
    pub selected_epoch: usize,
    pub last_epoch: BTreeMap<String, f64>,
}

fn clip_spec(video: &Video) -> ClipSpec {
    let (_, h, w) = video.frame_dims();
    ClipSpec::new(CLIP_LENGTH, SKIP_RATE, h, w)
}

/// Every tenth video is held out (at least one).
fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    let held: Vec<usize> = (0..n).filter(|i| i % 10 == 9).collect();
    let held = if held.is_empty() && n > 1 { vec![n - 1] } else { held };
    let train = (0..n).filter(|i| !held.contains(i)).collect();
    (train, held)
}

fn gradient_step(opt: &mut Adam, params: &mut ParamStore<f32>, bound: &Bound, grads: &mut crate::graph::Gradients<f32>) {
    let g = params.grads(bound, grads);
    opt.step(params, &g);
}

fn rows(g: &Graph<f32>, x: Var, start: usize, n: usize) -> Var {
    let d = g.shape(x)[1];
    g.gather(x, (start * d..(start + n) * d).collect(), &[n, d])
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Framewise anonymization in bounded chunks along the leading axis.
pub fn anonymize_chunked(fa: &Anonymizer<f32>, x: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for s in (0..n).step_by(chunk.max(1)) {
        let e = (s + chunk).min(n);
        let inner: Vec<Tensor<f32>> = (s..e).map(|i| x.index_axis0(i)).collect();
        let y = fa.anonymize(&Tensor::stack(&inner))?;
        parts.extend((0..e - s).map(|i| y.index_axis0(i)));
    }
    Ok(Tensor::stack(&parts))
}

/// Embeddings and logits of `[N, L, C, H, W]` clips, optionally anonymized first.
pub(crate) fn encode_clips(
    fa: Option<&Anonymizer<f32>>,
    ft: &UtilityEncoder<f32>,
    clips: &[Tensor<f32>],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut emb = Vec::new();
    let mut logits = Vec::new();
    for chunk in clips.chunks(EVAL_CHUNK) {
        let mut x = Tensor::stack(chunk);
        if let Some(fa) = fa {
            x = fa.anonymize(&x)?;
        }
        let (e, l) = ft.encode(&x)?;
        emb.extend((0..chunk.len()).map(|i| e.index_axis0(i)));
        logits.extend((0..chunk.len()).map(|i| l.index_axis0(i)));
    }
    Ok((Tensor::stack(&emb), Tensor::stack(&logits)))
}

fn centre_clip(v: &Video) -> Result<Tensor<f32>> {
    let span = clip_spec(v).span();
    let t = v.num_frames().checked_sub(span).ok_or_else(|| {
        Error::Dataset(format!("video `{}` is shorter than one clip window ({span} frames)", v.id))
    })?;
    Ok(sample_clip(v, t / 2, CLIP_LENGTH, SKIP_RATE)?.frames)
}

/// Top-1 action accuracy of `f_T` (through `f_A` when given) on the centre
/// clip of every video.
pub fn action_accuracy(fa: Option<&Anonymizer<f32>>, ft: &UtilityEncoder<f32>, ds: &VideoDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyInput("action dataset is empty".into()));
    }
    let clips = ds.videos.iter().map(centre_clip).collect::<Result<Vec<_>>>()?;
    let (_, logits) = encode_clips(fa, ft, &clips)?;
    let pred = argmax_rows(&logits);
    let hits = pred.iter().zip(&ds.videos).filter(|(p, v)| **p == v.label).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Mean Euclidean distance between the unit-normalized embeddings of
/// `clips_per_video` evenly spaced clips from the same video, averaged over
/// videos. Normalizing keeps the measure blind to the overall embedding scale.
pub fn intra_video_distance(
    fa: Option<&Anonymizer<f32>>,
    ft: &UtilityEncoder<f32>,
    ds: &VideoDataset,
    clips_per_video: usize,
) -> Result<f64> {
    if clips_per_video < 2 {
        return Err(Error::Parameter("need at least 2 clips per video".into()));
    }
    let mut total = 0.0;
    for v in &ds.videos {
        let max_start = v.num_frames().saturating_sub(clip_spec(v).span());
        let clips = (0..clips_per_video)
            .map(|i| Ok(sample_clip(v, i * max_start / (clips_per_video - 1), CLIP_LENGTH, SKIP_RATE)?.frames))
            .collect::<Result<Vec<_>>>()?;
        let (mut emb, _) = encode_clips(fa, ft, &clips)?;
        let d = emb.shape()[1];
        for row in emb.data_mut().chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..clips_per_video {
            for j in i + 1..clips_per_video {
                let a = &emb.data()[i * d..(i + 1) * d];
                let b = &emb.data()[j * d..(j + 1) * d];
                sum += a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / ds.len() as f64)
}

/// Trains `f_A` towards the identity with the L1 reconstruction loss.
pub fn pretrain_identity(
    fa: &mut Anonymizer<f32>,
    ds: &VideoDataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PretrainReport> {
    const STAGE: &str = "pretrain_identity";
    let started = Instant::now();
    if ds.len() < 2 {
        return Err(Error::Dataset("identity pretraining needs at least 2 videos".into()));
    }
    let mut rng = cfg.rng(STAGE);
    let (train, held) = holdout_split(ds.len());
    let held_frames: Vec<Tensor<f32>> = held
        .iter()
        .flat_map(|&i| {
            let v = &ds.videos[i];
            (0..4).map(move |k| v.frame(k * v.num_frames() / 4))
        })
        .collect();
    let held_frames = Tensor::stack(&held_frames);
    let mut opt = Adam::new(cfg.pretrain_lr, 0.0);
    let mut step = 0;
    let mut report = PretrainReport {
        epochs: 0,
        final_train_l1: f64::NAN,
        heldout_l1: f64::NAN,
        reached_at_epoch: None,
    };
    for epoch in 0..cfg.pretrain_epochs {
        let mut picks: Vec<(usize, usize)> = Vec::new();
        for &v in &train {
            for _ in 0..cfg.pretrain_frames_per_video {
                picks.push((v, rng.random_range(0..ds.videos[v].num_frames())));
            }
        }
        picks.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in picks.chunks(cfg.pretrain_batch) {
            let x = Tensor::stack(&chunk.iter().map(|&(v, t)| ds.videos[v].frame(t)).collect::<Vec<_>>());
            let pixels = x.len() as f64 / chunk.len() as f64;
            let g = Graph::new();
            let p = fa.params.bind(&g, true);
            let xv = g.constant(x);
            let y = fa.forward(&g, &p, xv);
            let loss = l1_reconstruction(&g, xv, y)?;
            let per_pixel = finite(STAGE, step, "l1", g.item(loss) as f64)? / pixels;
            let mut grads = g.backward(loss);
            drop(g);
            gradient_step(&mut opt, &mut fa.params, &p, &mut grads);
            log.step(STAGE, epoch, step, &[("l1", per_pixel)]);
            epoch_sum += per_pixel;
            batches += 1;
            step += 1;
        }
        let out = anonymize_chunked(fa, &held_frames, 64)?;
        let heldout = out.data().iter().zip(held_frames.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / held_frames.len() as f64;
        let train_l1 = epoch_sum / batches.max(1) as f64;
        log.epoch(STAGE, epoch, &[("train_l1", train_l1), ("heldout_l1", heldout)]);
        report.epochs = epoch + 1;
        report.final_train_l1 = train_l1;
        report.heldout_l1 = heldout;
        if heldout < cfg.pretrain_threshold && report.reached_at_epoch.is_none() {
            report.reached_at_epoch = Some(epoch + 1);
        }
    }
    if report.reached_at_epoch.is_none() {
        log::warn!(
            "identity pretraining: held-out L1 {:.4} did not reach {} in {} epochs",
            report.heldout_l1,
            cfg.pretrain_threshold,
            cfg.pretrain_epochs
        );
    }
    log.add_time(STAGE, started.elapsed().as_secs_f64());
    Ok(report)
}

fn random_aug(rng: &mut impl Rng, v: &Video, cfg: &TrainConfig) -> AugmentationParams {
    let (_, h, w) = v.frame_dims();
    AugmentationParams::random(rng, h, w, h, w, &cfg.augment)
}

fn random_frame(rng: &mut impl Rng, v: &Video, t: usize, cfg: &TrainConfig) -> Result<Tensor<f32>> {
    let clip = sample_clip(v, t, 1, 1)?;
    let aug = random_aug(rng, v, cfg);
    let (_, h, w) = v.frame_dims();
    Ok(augment_clip(&clip, &aug, h, w)?.frames.index_axis0(0))
}

/// Two distinct random frames per video, independently augmented.
fn frame_pairs(rng: &mut impl Rng, videos: &[&Video], cfg: &TrainConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut a = Vec::with_capacity(videos.len());
    let mut b = Vec::with_capacity(videos.len());
    for v in videos {
        let n = v.num_frames();
        if n < 2 {
            return Err(Error::Dataset(format!("video `{}` needs at least 2 frames", v.id)));
        }
        let t1 = rng.random_range(0..n);
        let t2 = (t1 + rng.random_range(1..n)) % n;
        a.push(random_frame(rng, v, t1, cfg)?);
        b.push(random_frame(rng, v, t2, cfg)?);
    }
    Ok((Tensor::stack(&a), Tensor::stack(&b)))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn batches(rng: &mut impl Rng, n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Desk-scale stand-in for pretrained weights: supervised action training of
/// `f_T` and contrastive (same video = positive) training of `f_B`.
pub fn init_encoders(
    ft: &mut UtilityEncoder<f32>,
    fb: &mut BudgetEncoder<f32>,
    ds: &VideoDataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<InitReport> {
    const STAGE_T: &str = "init_utility";
    const STAGE_B: &str = "init_budget";
    if ds.kind != DatasetKind::Action || ds.class_count < 2 {
        return Err(Error::Dataset("encoder initialization needs an action dataset with class labels".into()));
    }
    if ds.len() < 2 {
        return Err(Error::Dataset("encoder initialization needs at least 2 videos".into()));
    }
    let started = Instant::now();
    let mut rng = cfg.rng(STAGE_T);
    let mut opt = Adam::new(cfg.init_lr, 0.0);
    let mut step = 0;
    for epoch in 0..cfg.init_utility_epochs {
        let (mut sum, mut hits, mut seen, mut n) = (0.0, 0, 0, 0);
        for chunk in batches(&mut rng, ds.len(), cfg.anon_batch) {
            let mut clips = Vec::new();
            let mut labels = Vec::new();
            for &i in &chunk {
                let v = &ds.videos[i];
                let spec = clip_spec(v);
                let t = rng.random_range(0..=v.num_frames() - spec.span());
                let aug = random_aug(&mut rng, v, cfg);
                clips.push(augment_clip(&sample_clip(v, t, CLIP_LENGTH, SKIP_RATE)?, &aug, spec.height, spec.width)?.frames);
                labels.push(v.label);
            }
            let g = Graph::new();
            let p = ft.params.bind(&g, true);
            let out = ft.forward(&g, &p, g.constant(Tensor::stack(&clips)));
            let ce = cross_entropy(&g, out.logits, &labels)?;
            let lv = finite(STAGE_T, step, "ce", g.item(ce) as f64)?;
            let pred = argmax_rows(&g.value(out.logits));
            hits += pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
            seen += labels.len();
            let mut grads = g.backward(ce);
            drop(g);
            gradient_step(&mut opt, &mut ft.params, &p, &mut grads);
            log.step(STAGE_T, epoch, step, &[("ce", lv)]);
            sum += lv;
            n += 1;
            step += 1;
        }
        log.epoch(STAGE_T, epoch, &[("ce", sum / n.max(1) as f64), ("train_accuracy", hits as f64 / seen.max(1) as f64)]);
    }
    log.add_time(STAGE_T, started.elapsed().as_secs_f64());

    let started = Instant::now();
    let mut rng = cfg.rng(STAGE_B);
    let mut opt = Adam::new(cfg.init_lr, 0.0);
    let mut step = 0;
    for epoch in 0..cfg.init_budget_epochs {
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in batches(&mut rng, ds.len(), cfg.anon_batch) {
            let videos: Vec<&Video> = chunk.iter().map(|&i| &ds.videos[i]).collect();
            let (a, b) = frame_pairs(&mut rng, &videos, cfg)?;
            let g = Graph::new();
            let p = fb.params.bind(&g, true);
            let za = fb.forward(&g, &p, g.constant(a));
            let zb = fb.forward(&g, &p, g.constant(b));
            let loss = budget_nt_xent(&g, za, zb, cfg.loss.temperature)?;
            let lv = finite(STAGE_B, step, "nt_xent", g.item(loss) as f64)?;
            let mut grads = g.backward(loss);
            drop(g);
            gradient_step(&mut opt, &mut fb.params, &p, &mut grads);
            log.step(STAGE_B, epoch, step, &[("nt_xent", lv)]);
            sum += lv;
            n += 1;
            step += 1;
        }
        log.epoch(STAGE_B, epoch, &[("nt_xent", sum / n.max(1) as f64)]);
    }
    log.add_time(STAGE_B, started.elapsed().as_secs_f64());

    let (pos, neg) = budget_separation(None, fb, ds)?;
    Ok(InitReport {
        utility_accuracy: action_accuracy(None, ft, ds)?,
        budget_positive_similarity: pos,
        budget_negative_similarity: neg,
    })
}

/// Mean cosine similarity of `f_B` projections for frame pairs from the same
/// video (positives) and from different videos (negatives).
pub fn budget_separation(fa: Option<&Anonymizer<f32>>, fb: &BudgetEncoder<f32>, ds: &VideoDataset) -> Result<(f64, f64)> {
    let a = Tensor::stack(&ds.videos.iter().map(|v| v.frame(v.num_frames() / 4)).collect::<Vec<_>>());
    let b = Tensor::stack(&ds.videos.iter().map(|v| v.frame(3 * v.num_frames() / 4)).collect::<Vec<_>>());
    let (a, b) = match fa {
        Some(fa) => (anonymize_chunked(fa, &a, 64)?, anonymize_chunked(fa, &b, 64)?),
        None => (a, b),
    };
    let za = fb.encode(&a)?;
    let zb = fb.encode(&b)?;
    let d = za.shape()[1];
    let n = ds.len();
    let row = |t: &Tensor<f32>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let pos = (0..n).map(|i| cosine(&row(&za, i), &row(&zb, i))).sum::<f64>() / n as f64;
    let mut neg = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            neg += cosine(&row(&za, i), &row(&zb, j));
        }
    }
    Ok((pos, neg / (n * (n - 1)) as f64))
}

/// One minimax minibatch: triplet clips stacked as anchors, positives,
/// negatives, plus two frames per video for the budget branch.
struct MinimaxBatch {
    clips: Tensor<f32>,
    labels: Vec<usize>,
    frames_a: Tensor<f32>,
    frames_b: Tensor<f32>,
}

fn minimax_batch(rng: &mut impl Rng, ds: &VideoDataset, idx: &[usize], cfg: &TrainConfig) -> Result<MinimaxBatch> {
    let (mut anchors, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
    let mut labels = Vec::new();
    let videos: Vec<&Video> = idx.iter().map(|&i| &ds.videos[i]).collect();
    for v in &videos {
        let spec = clip_spec(v);
        let anchor_t = rng.random_range(0..=v.num_frames().saturating_sub(spec.span()));
        let a0 = random_aug(rng, v, cfg);
        let a1 = random_aug(rng, v, cfg);
        let t = sample_triplet(v, anchor_t, NegativeDistance::Random, (&a0, &a1), spec, rng)?;
        anchors.push(t.anchor.frames);
        positives.push(t.positive.frames);
        negatives.push(t.negative.frames);
        labels.push(v.label);
    }
    let (frames_a, frames_b) = frame_pairs(rng, &videos, cfg)?;
    anchors.extend(positives);
    anchors.extend(negatives);
    Ok(MinimaxBatch {
        clips: Tensor::stack(&anchors),
        labels,
        frames_a,
        frames_b,
    })
}

struct MinimaxLosses {
    ce: Var,
    temporal: Var,
    utility: Var,
    budget: Var,
    correct: usize,
}

#[allow(clippy::too_many_arguments)]
fn minimax_losses(
    g: &Graph<f32>,
    (fa, pa): (&Anonymizer<f32>, &Bound),
    (ft, pt): (&UtilityEncoder<f32>, &Bound),
    (fb, pb): (&BudgetEncoder<f32>, &Bound),
    batch: &MinimaxBatch,
    cfg: &TrainConfig,
) -> Result<MinimaxLosses> {
    let b = batch.labels.len();
    let clips = fa.forward_frames(g, pa, g.constant(batch.clips.clone()));
    let out = ft.forward(g, pt, clips);
    let anchor = rows(g, out.embedding, 0, b);
    let positive = rows(g, out.embedding, b, b);
    let negative = rows(g, out.embedding, 2 * b, b);
    let logits = rows(g, out.logits, 0, b);
    let ce = cross_entropy(g, logits, &batch.labels)?;
    let temporal = match cfg.loss.temporal_objective {
        TemporalObjective::Triplet => triplet_distinct(g, anchor, positive, negative, cfg.loss.margin)?,
        TemporalObjective::Invariance => invariance_nt_xent(g, anchor, negative, cfg.loss.temperature)?,
    };
    let utility = utility_loss(g, ce, temporal, cfg.loss.omega_d);
    let za = fb.forward(g, pb, fa.forward(g, pa, g.constant(batch.frames_a.clone())));
    let zb = fb.forward(g, pb, fa.forward(g, pa, g.constant(batch.frames_b.clone())));
    let budget = budget_nt_xent(g, za, zb, cfg.loss.temperature)?;
    let correct = argmax_rows(&g.value(logits)).iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(MinimaxLosses {
        ce,
        temporal,
        utility,
        budget,
        correct,
    })
}

struct Snapshot {
    fa: ParamStore<f32>,
    ft: ParamStore<f32>,
    fb: ParamStore<f32>,
}

/// Two-step minimax. Step-1 updates `f_A` on `L_T - omega_B * L_B` with the
/// encoders frozen; Step-2 updates `f_T` on `L_T` and `f_B` on `L_B` with
/// `f_A` frozen. On a non-finite loss every model is restored to its state
/// before the failing iteration.
pub fn train_anonymization(
    fa: &mut Anonymizer<f32>,
    ft: &mut UtilityEncoder<f32>,
    fb: &mut BudgetEncoder<f32>,
    ds: &VideoDataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<AnonReport> {
    const STAGE: &str = "train_anonymization";
    if ds.len() < 2 {
        return Err(Error::Dataset("minimax training needs at least 2 videos".into()));
    }
    let started = Instant::now();
    let mut rng = cfg.rng(STAGE);
    let mut opt_a = Adam::new(cfg.lr_anonymizer, 0.0);
    let mut opt_t = Adam::new(cfg.lr_utility, 0.0);
    let mut opt_b = Adam::new(cfg.lr_budget, 0.0);
    let mut step = 0;
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut first_budget = None;
    let mut last_epoch = BTreeMap::new();
    for epoch in 0..cfg.anon_epochs {
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        let (mut correct, mut seen, mut iters) = (0, 0, 0);
        for chunk in batches(&mut rng, ds.len(), cfg.anon_batch) {
            let good = Snapshot {
                fa: fa.params.clone(),
                ft: ft.params.clone(),
                fb: fb.params.clone(),
            };
            let restore = |fa: &mut Anonymizer<f32>, ft: &mut UtilityEncoder<f32>, fb: &mut BudgetEncoder<f32>, s: &Snapshot| {
                fa.params = s.fa.clone();
                ft.params = s.ft.clone();
                fb.params = s.fb.clone();
            };
            let batch1 = minimax_batch(&mut rng, ds, &chunk, cfg)?;
            let batch2 = if cfg.same_batch {
                None
            } else {
                let mut other: Vec<usize> = (0..ds.len()).collect();
                other.shuffle(&mut rng);
                other.truncate(chunk.len());
                Some(minimax_batch(&mut rng, ds, &other, cfg)?)
            };

            // Step-1: anonymizer only.
            let step1 = (|| -> Result<[f64; 5]> {
                let g = Graph::new();
                let pa = fa.params.bind(&g, true);
                let pt = ft.params.bind(&g, false);
                let pb = fb.params.bind(&g, false);
                let l = minimax_losses(&g, (fa, &pa), (ft, &pt), (fb, &pb), &batch1, cfg)?;
                let objective = g.sub(l.utility, g.scale(l.budget, cfg.loss.omega_b));
                let vals = [l.ce, l.temporal, l.utility, l.budget, objective].map(|v| g.item(v) as f64);
                for (name, v) in ["ce", "temporal", "utility", "budget", "step1_objective"].iter().zip(vals) {
                    finite(STAGE, step, name, v)?;
                }
                let mut grads = g.backward(objective);
                drop(g);
                gradient_step(&mut opt_a, &mut fa.params, &pa, &mut grads);
                Ok(vals)
            })();
            let step1 = match step1 {
                Ok(v) => v,
                Err(e) => {
                    restore(fa, ft, fb, &good);
                    return Err(e);
                }
            };
            assert!(
                ft.params.same_values(&good.ft) && fb.params.same_values(&good.fb),
                "step-1 modified the utility or budget encoder"
            );

            // Step-2: encoders only, on data anonymized by the updated f_A.
            let frozen_a = fa.params.clone();
            let batch = batch2.as_ref().unwrap_or(&batch1);
            let step2 = (|| -> Result<[f64; 2]> {
                let g = Graph::new();
                let pa = fa.params.bind(&g, false);
                let pt = ft.params.bind(&g, true);
                let pb = fb.params.bind(&g, true);
                let l = minimax_losses(&g, (fa, &pa), (ft, &pt), (fb, &pb), batch, cfg)?;
                let vals = [l.utility, l.budget].map(|v| g.item(v) as f64);
                finite(STAGE, step, "step2_utility", vals[0])?;
                finite(STAGE, step, "step2_budget", vals[1])?;
                correct += l.correct;
                seen += batch.labels.len();
                let total = g.add(l.utility, l.budget);
                let mut grads = g.backward(total);
                drop(g);
                gradient_step(&mut opt_t, &mut ft.params, &pt, &mut grads);
                gradient_step(&mut opt_b, &mut fb.params, &pb, &mut grads);
                Ok(vals)
            })();
            let step2 = match step2 {
                Ok(v) => v,
                Err(e) => {
                    restore(fa, ft, fb, &good);
                    return Err(e);
                }
            };
            assert!(fa.params.same_values(&frozen_a), "step-2 modified the anonymizer");

            let record = [
                ("ce", step1[0]),
                ("temporal", step1[1]),
                ("utility", step1[2]),
                ("budget", step1[3]),
                ("step1_objective", step1[4]),
                ("step2_utility", step2[0]),
                ("step2_budget", step2[1]),
            ];
            for (k, v) in record {
                *sums.entry(k).or_default() += v;
            }
            log.step(STAGE, epoch, step, &record);
            step += 1;
            iters += 1;
        }
        let mut metrics: Vec<(&str, f64)> = sums.iter().map(|(k, v)| (*k, v / iters.max(1) as f64)).collect();
        let accuracy = correct as f64 / seen.max(1) as f64;
        metrics.push(("train_accuracy", accuracy));
        log.epoch(STAGE, epoch, &metrics);
        last_epoch = metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect();

        if cfg.checkpoint_selection == CheckpointSelection::BestUtility {
            let budget = sums.get("budget").copied().unwrap_or(0.0) / iters.max(1) as f64;
            let floor = *first_budget.get_or_insert(budget);
            let better = best.as_ref().is_none_or(|(acc, _, _)| accuracy > *acc);
            if budget >= floor && better {
                let snap = Snapshot {
                    fa: fa.params.clone(),
                    ft: ft.params.clone(),
                    fb: fb.params.clone(),
                };
                best = Some((accuracy, epoch + 1, snap));
            }
        }
    }
    let mut selected = cfg.anon_epochs;
    if let Some((_, epoch, snap)) = best {
        fa.params = snap.fa;
        ft.params = snap.ft;
        fb.params = snap.fb;
        selected = epoch;
    }
    log.add_time(STAGE, started.elapsed().as_secs_f64());
    Ok(AnonReport {
        iterations: step,
        selected_epoch: selected,
        last_epoch,
    })
}
