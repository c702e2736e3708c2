//! Differentiable training objectives.
//!
//! Every function records its computation on the caller's [`Graph`], so the
//! same code yields loss values and gradients. Batch reductions are
//! arithmetic means unless the formula sums explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Probability floor for log terms.
pub const PROB_EPS: f64 = 1e-7;
/// Floor applied to norms before they are used as divisors.
pub const NORM_EPS: f64 = 1e-12;

/// Which temporal objective accompanies cross-entropy in the utility branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalObjective {
    /// Temporally-distinct triplet loss.
    #[default]
    Triplet,
    /// Same-video clips pulled together (contrastive invariance).
    Invariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the temporal term in the utility loss.
    pub omega_d: f64,
    /// Triplet margin.
    pub margin: f64,
    /// Weight of the budget loss in the anonymizer update.
    pub omega_b: f64,
    /// Contrastive temperature.
    pub temperature: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    pub lambda_mc: f64,
    pub mc_margin: f64,
    pub top_k: usize,
    pub temporal_objective: TemporalObjective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            omega_d: 0.1,
            margin: 1.0,
            omega_b: 1.0,
            temperature: 0.1,
            lambda_smooth: 1.0,
            lambda_sparse: 1.0,
            lambda_mc: 0.001,
            mc_margin: 100.0,
            top_k: 3,
            temporal_objective: TemporalObjective::Triplet,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("loss config: {what}")))
            }
        };
        check(self.margin > 0.0, "margin must be > 0")?;
        check(self.temperature > 0.0, "temperature must be > 0")?;
        check(self.top_k >= 1, "top_k must be >= 1")?;
        check(
            self.lambda_smooth >= 0.0 && self.lambda_sparse >= 0.0 && self.lambda_mc >= 0.0,
            "lambda weights must be >= 0",
        )?;
        check(self.omega_d >= 0.0 && self.omega_b >= 0.0, "omega weights must be >= 0")?;
        check(self.mc_margin >= 0.0, "mc_margin must be >= 0")
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

fn rows<T: Scalar>(g: &Graph<T>, x: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(x).as_slice() {
        &[n, d] => Ok((n, d)),
        s => Err(Error::Shape(format!("{what}: expected [N, D], got {s:?}"))),
    }
}

/// Per-image sum of absolute differences over channels and pixels, averaged
/// over the batch. Accepts `[C, H, W]` or `[N, C, H, W]`.
pub fn l1_reconstruction<T: Scalar>(g: &Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    let shape = same_shape(g, x, x_hat, "l1_reconstruction")?;
    let batch = match shape.len() {
        3 => 1,
        4 => shape[0],
        _ => return Err(Error::Shape(format!("l1_reconstruction: expected image(s), got {shape:?}"))),
    };
    let total = g.sum_all(g.abs(g.sub(x, x_hat)));
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Euclidean distance between matching rows, `[N, D] x [N, D] -> [N]`.
pub fn pairwise_distance<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b, "pairwise_distance")?;
    rows(g, a, "pairwise_distance")?;
    Ok(g.row_norm(g.sub(a, b), NORM_EPS))
}

/// Hinged triplet margin loss `max(d(a,p) - d(a,n) + margin, 0)`, batch mean.
pub fn triplet_distinct<T: Scalar>(g: &Graph<T>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::Parameter(format!("triplet margin must be > 0, got {margin}")));
    }
    same_shape(g, anchor, negative, "triplet_distinct")?;
    let d_pos = pairwise_distance(g, anchor, positive)?;
    let d_neg = pairwise_distance(g, anchor, negative)?;
    let hinge = g.relu(g.add_scalar(g.sub(d_pos, d_neg), margin));
    Ok(g.mean_all(hinge))
}

/// Softmax cross-entropy over `[N, K]` logits, batch mean.
pub fn cross_entropy<T: Scalar>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = rows(g, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("cross_entropy: {n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidClass { index: bad, classes: k });
    }
    let logp = g.log_softmax(logits);
    let picked = g.gather(logp, labels.iter().enumerate().map(|(i, &y)| i * k + y).collect(), &[n]);
    Ok(g.scale(g.sum_all(picked), -1.0 / n as f64))
}

/// `ce + omega_d * l_d`.
pub fn utility_loss<T: Scalar>(g: &Graph<T>, ce: Var, l_d: Var, omega_d: f64) -> Var {
    g.add(ce, g.scale(l_d, omega_d))
}

/// Normalised-temperature cross-entropy over `B` positive pairs.
///
/// Row `i` of `view_a` and row `i` of `view_b` form a positive pair. Each of
/// the `2B` embeddings is an anchor; its denominator runs over the other
/// `2B - 1` embeddings (the positive plus both views of every other pair).
pub fn nt_xent<T: Scalar>(g: &Graph<T>, view_a: Var, view_b: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    same_shape(g, view_a, view_b, "nt_xent")?;
    let (b, d) = rows(g, view_a, "nt_xent")?;
    if b < 2 {
        return Err(Error::InsufficientNegatives(b));
    }
    for v in [view_a, view_b] {
        let norms = g.value(g.row_norm(v, NORM_EPS));
        if norms.data().iter().any(|n| n.as_f64() < NORM_EPS || !n.is_finite()) {
            return Err(Error::Numeric("nt_xent: zero-norm or non-finite embedding".into()));
        }
    }
    let n = 2 * b;
    let za = g.reshape(view_a, &[1, b, d]);
    let zb = g.reshape(view_b, &[1, b, d]);
    let z = g.reshape(g.concat1(&[za, zb]), &[n, d]);
    let zn = g.row_normalize(z, NORM_EPS);
    let sim = g.scale(g.matmul(zn, g.transpose_last(zn)), 1.0 / temperature);
    let mut mask = Tensor::<T>::zeros(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = T::from_f64_lossy(-1e9);
    }
    let logits = g.add(sim, g.constant(mask));
    let logp = g.log_softmax(logits);
    let positives = (0..n).map(|i| i * n + (i + b) % n).collect();
    let picked = g.gather(logp, positives, &[n]);
    Ok(g.scale(g.sum_all(picked), -1.0 / n as f64))
}

/// Budget (privacy) loss: positives are two frames of the same video.
pub fn budget_nt_xent<T: Scalar>(g: &Graph<T>, frames_a: Var, frames_b: Var, temperature: f64) -> Result<Var> {
    nt_xent(g, frames_a, frames_b, temperature)
}

/// Temporal invariance loss: positives are two clips of the same video
/// taken at different timestamps.
pub fn invariance_nt_xent<T: Scalar>(g: &Graph<T>, clips_t: Var, clips_t2: Var, temperature: f64) -> Result<Var> {
    nt_xent(g, clips_t, clips_t2, temperature)
}

/// Binary cross-entropy on probabilities, clamped to `[eps, 1 - eps]`, mean
/// over the `[N]` scores.
pub fn sigmoid_ce<T: Scalar>(g: &Graph<T>, scores: Var, labels: &[f64]) -> Result<Var> {
    let shape = g.shape(scores);
    if shape.len() != 1 || shape[0] != labels.len() {
        return Err(Error::Shape(format!("sigmoid_ce: scores {shape:?}, {} labels", labels.len())));
    }
    let n = labels.len();
    let s = g.clamp(scores, PROB_EPS, 1.0 - PROB_EPS);
    let log_s = g.log(s);
    let log_1ms = g.log(g.add_scalar(g.scale(s, -1.0), 1.0));
    let y = g.constant(Tensor::from_f64_slice(&[n], labels));
    let one_minus_y: Vec<f64> = labels.iter().map(|y| 1.0 - y).collect();
    let ny = g.constant(Tensor::from_f64_slice(&[n], &one_minus_y));
    let ll = g.add(g.mul(y, log_s), g.mul(ny, log_1ms));
    Ok(g.scale(g.sum_all(ll), -1.0 / n as f64))
}

/// `sum_i (s_i - s_{i+1})^2` per row of `[B, S]`, mean over rows.
pub fn temporal_smoothness<T: Scalar>(g: &Graph<T>, scores: Var) -> Result<Var> {
    let (b, s) = rows(g, scores, "temporal_smoothness")?;
    if b == 0 {
        return Err(Error::EmptyInput("temporal_smoothness: no videos".into()));
    }
    if s < 2 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let head: Vec<usize> = (0..b).flat_map(|r| (0..s - 1).map(move |i| r * s + i)).collect();
    let tail: Vec<usize> = head.iter().map(|i| i + 1).collect();
    let shape = [b * (s - 1)];
    let diff = g.sub(g.gather(scores, head, &shape), g.gather(scores, tail, &shape));
    Ok(g.scale(g.sum_all(g.square(diff)), 1.0 / b as f64))
}

/// `sum_i s_i` per row of `[B, S]`, mean over rows.
pub fn sparsity<T: Scalar>(g: &Graph<T>, scores: Var) -> Result<Var> {
    let (b, _) = rows(g, scores, "sparsity")?;
    if b == 0 {
        return Err(Error::EmptyInput("sparsity: no videos".into()));
    }
    Ok(g.scale(g.sum_all(scores), 1.0 / b as f64))
}

fn pair_gather<T: Scalar>(g: &Graph<T>, x: Var, idx: Vec<usize>) -> Var {
    let n = idx.len();
    g.gather(x, idx, &[n])
}

/// Magnitude contrast between a normal half and an anomalous half of a batch.
///
/// Same-type ordered pairs contribute `|M_p - M_q|`; cross pairs contribute
/// `max(0, margin - |M_n - M_a|)`. Each of the three sums is divided by its
/// pair count.
pub fn magnitude_contrastive<T: Scalar>(g: &Graph<T>, normal: Var, anomalous: Var, margin: f64) -> Result<Var> {
    let (sn, sa) = (g.shape(normal), g.shape(anomalous));
    if sn.len() != 1 || sa.len() != 1 {
        return Err(Error::Shape(format!("magnitude_contrastive: expected rank-1, got {sn:?} and {sa:?}")));
    }
    let (p, q) = (sn[0], sa[0]);
    if p == 0 || q == 0 {
        return Err(Error::EmptyInput("magnitude_contrastive: empty batch half".into()));
    }
    let within = |x: Var, n: usize| {
        let left = (0..n).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let right = (0..n).flat_map(|_| 0..n).collect();
        let d = g.abs(g.sub(pair_gather(g, x, left), pair_gather(g, x, right)));
        g.mean_all(d)
    };
    let same_normal = within(normal, p);
    let same_anom = within(anomalous, q);
    let left = (0..p).flat_map(|i| std::iter::repeat_n(i, q)).collect();
    let right = (0..p).flat_map(|_| 0..q).collect();
    let cross = g.abs(g.sub(pair_gather(g, normal, left), pair_gather(g, anomalous, right)));
    let hinge = g.relu(g.add_scalar(g.scale(cross, -1.0), margin));
    Ok(g.add(g.add(same_normal, same_anom), g.mean_all(hinge)))
}

/// Indices of the `k` largest values, ties broken towards the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Components of the anomaly-detector objective for one batch.
pub struct MgfnLoss {
    pub total: Var,
    pub sce: Var,
    pub smooth: Var,
    pub sparse: Var,
    /// `None` when the batch lacks one of the two classes.
    pub mc: Option<Var>,
    /// Mean score of the top-k magnitude segments per video, `[B]`.
    pub video_scores: Var,
}

impl MgfnLoss {
    pub fn mc_skipped(&self) -> bool {
        self.mc.is_none()
    }
}

/// Weakly supervised anomaly objective on per-segment scores and magnitudes
/// (`[B, S]` each) with video-level labels.
pub fn mgfn_total<T: Scalar>(g: &Graph<T>, scores: Var, magnitudes: Var, labels: &[bool], cfg: &LossConfig) -> Result<MgfnLoss> {
    let (b, s) = rows(g, scores, "mgfn_total scores")?;
    if g.shape(magnitudes) != [b, s] {
        return Err(Error::Shape(format!(
            "mgfn_total: magnitudes {:?} vs scores {:?}",
            g.shape(magnitudes),
            [b, s]
        )));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("mgfn_total: {b} videos but {} labels", labels.len())));
    }
    if b == 0 || s == 0 {
        return Err(Error::EmptyInput("mgfn_total: empty batch".into()));
    }
    let k = cfg.top_k.min(s);
    let mag_values = g.value(magnitudes);
    let mut top = Vec::with_capacity(b * k);
    for r in 0..b {
        let row: Vec<f64> = mag_values.data()[r * s..(r + 1) * s].iter().map(|v| v.as_f64()).collect();
        top.extend(top_k_indices(&row, k).into_iter().map(|i| r * s + i));
    }
    let inv_k = 1.0 / k as f64;
    let video_scores = g.scale(g.sum_last_axis(g.gather(scores, top.clone(), &[b, k])), inv_k);
    let video_mags = g.scale(g.sum_last_axis(g.gather(magnitudes, top, &[b, k])), inv_k);

    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let sce = sigmoid_ce(g, video_scores, &y)?;
    let smooth = temporal_smoothness(g, scores)?;

    let anomalous: Vec<usize> = (0..b).filter(|&i| labels[i]).collect();
    let normal: Vec<usize> = (0..b).filter(|&i| !labels[i]).collect();
    let sparse = if anomalous.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        let idx: Vec<usize> = anomalous.iter().flat_map(|&r| (0..s).map(move |i| r * s + i)).collect();
        sparsity(g, g.gather(scores, idx, &[anomalous.len(), s]))?
    };
    let mc = if anomalous.is_empty() || normal.is_empty() {
        None
    } else {
        let mn = pair_gather(g, video_mags, normal);
        let ma = pair_gather(g, video_mags, anomalous);
        Some(magnitude_contrastive(g, mn, ma, cfg.mc_margin)?)
    };

    let mut total = g.add(sce, g.scale(smooth, cfg.lambda_smooth));
    total = g.add(total, g.scale(sparse, cfg.lambda_sparse));
    if let Some(mc) = mc {
        total = g.add(total, g.scale(mc, cfg.lambda_mc));
    }
    Ok(MgfnLoss {
        total,
        sce,
        smooth,
        sparse,
        mc,
        video_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(g: &Graph<f64>, shape: &[usize], v: &[f64]) -> Var {
        g.leaf(Tensor::from_f64_slice(shape, v))
    }

    #[test]
    fn l1_examples() {
        let g = Graph::new();
        let ones = t(&g, &[3, 2, 2], &[1.0; 12]);
        let zeros = t(&g, &[3, 2, 2], &[0.0; 12]);
        assert_eq!(g.item(l1_reconstruction(&g, ones, zeros).unwrap()), 12.0);
        assert_eq!(g.item(l1_reconstruction(&g, ones, ones).unwrap()), 0.0);
        assert_eq!(g.item(l1_reconstruction(&g, zeros, ones).unwrap()), 12.0);
        let bad = t(&g, &[3, 2, 1], &[0.0; 6]);
        assert!(matches!(l1_reconstruction(&g, ones, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn triplet_examples() {
        let g = Graph::new();
        let a = t(&g, &[1, 2], &[0.0, 0.0]);
        let p = t(&g, &[1, 2], &[3.0, 4.0]);
        assert_eq!(g.item(triplet_distinct(&g, a, p, a, 1.0).unwrap()), 6.0);
        let n = t(&g, &[1, 2], &[2.0, 0.0]);
        assert_eq!(g.item(triplet_distinct(&g, a, a, n, 1.0).unwrap()), 0.0);
        let n2 = t(&g, &[1, 2], &[-3.0, 4.0]);
        assert_eq!(g.item(triplet_distinct(&g, a, p, n2, 1.0).unwrap()), 1.0);
        let short = t(&g, &[1, 3], &[0.0; 3]);
        assert!(triplet_distinct(&g, a, p, short, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::new();
        let peaked = t(&g, &[1, 4], &[1000.0, 0.0, 0.0, 0.0]);
        assert!(g.item(cross_entropy(&g, peaked, &[0]).unwrap()) < 1e-12);
        let uniform = t(&g, &[1, 4], &[0.3; 4]);
        let ce = g.item(cross_entropy(&g, uniform, &[2]).unwrap());
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&g, uniform, &[4]),
            Err(Error::InvalidClass { index: 4, classes: 4 })
        ));
    }

    #[test]
    fn utility_loss_arithmetic() {
        let g = Graph::<f64>::new();
        let ce = g.constant(Tensor::scalar(1.0));
        let ld = g.constant(Tensor::scalar(2.0));
        assert!((g.item(utility_loss(&g, ce, ld, 0.1)) - 1.2).abs() < 1e-12);
        assert_eq!(g.item(utility_loss(&g, ce, ld, 0.0)), 1.0);
    }

    #[test]
    fn nt_xent_closed_forms() {
        let g = Graph::new();
        // two pairs, identical positives, orthogonal across pairs
        let a = t(&g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let l = g.item(nt_xent(&g, a, a, 0.1).unwrap());
        let expected = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
        assert!((expected - 9.08e-5_f64).abs() < 1e-7);

        let same = t(&g, &[3, 2], &[0.6, 0.8, 0.6, 0.8, 0.6, 0.8]);
        let l = g.item(nt_xent(&g, same, same, 0.1).unwrap());
        assert!((l - 5f64.ln()).abs() < 1e-9);

        let one = t(&g, &[1, 2], &[1.0, 0.0]);
        assert!(matches!(nt_xent(&g, one, one, 0.1), Err(Error::InsufficientNegatives(1))));
        let zero = t(&g, &[2, 2], &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(nt_xent(&g, zero, a, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sigmoid_ce_examples() {
        let g = Graph::new();
        let s = t(&g, &[2], &[0.5, 0.5]);
        assert!((g.item(sigmoid_ce(&g, s, &[1.0, 0.0]).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let s = t(&g, &[1], &[0.9]);
        assert!((g.item(sigmoid_ce(&g, s, &[0.0]).unwrap()) - 2.302585092994046).abs() < 1e-9);
        let s = t(&g, &[1], &[1.0]);
        assert!(g.item(sigmoid_ce(&g, s, &[1.0]).unwrap()) < 1e-6);
    }

    #[test]
    fn smoothness_and_sparsity_examples() {
        let g = Graph::new();
        let s = t(&g, &[1, 3], &[0.0, 1.0, 0.0]);
        assert_eq!(g.item(temporal_smoothness(&g, s).unwrap()), 2.0);
        let c = t(&g, &[1, 3], &[0.4; 3]);
        assert_eq!(g.item(temporal_smoothness(&g, c).unwrap()), 0.0);
        let one = t(&g, &[1, 1], &[0.7]);
        assert_eq!(g.item(temporal_smoothness(&g, one).unwrap()), 0.0);
        let sp = t(&g, &[1, 2], &[0.2, 0.3]);
        assert!((g.item(sparsity(&g, sp).unwrap()) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn magnitude_contrastive_examples() {
        let g = Graph::new();
        let n = t(&g, &[2], &[5.0, 5.0]);
        let a = t(&g, &[2], &[5.0, 5.0]);
        assert_eq!(g.item(magnitude_contrastive(&g, n, a, 100.0).unwrap()), 100.0);
        let a = t(&g, &[2], &[105.0, 105.0]);
        assert_eq!(g.item(magnitude_contrastive(&g, n, a, 100.0).unwrap()), 0.0);
        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(magnitude_contrastive(&g, n, empty, 1.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mgfn_without_regularisers_is_top_k_sigmoid_ce() {
        let g = Graph::new();
        let scores = t(&g, &[2, 3], &[0.1, 0.8, 0.3, 0.2, 0.4, 0.6]);
        let mags = t(&g, &[2, 3], &[1.0, 3.0, 2.0, 5.0, 5.0, 0.5]);
        let cfg = LossConfig {
            lambda_smooth: 0.0,
            lambda_sparse: 0.0,
            lambda_mc: 0.0,
            top_k: 2,
            ..LossConfig::default()
        };
        let out = mgfn_total(&g, scores, mags, &[true, false], &cfg).unwrap();
        // video 0: top magnitudes at 1, 2 -> (0.8 + 0.3)/2; video 1: ties at 0, 1 -> (0.2 + 0.4)/2
        let (s0, s1): (f64, f64) = (0.55, 0.3);
        let expected = -(s0.ln() + (1.0 - s1).ln()) / 2.0;
        assert!((g.item(out.total) - expected).abs() < 1e-12);
        let single = mgfn_total(&g, scores, mags, &[true, true], &cfg).unwrap();
        assert!(single.mc_skipped());
    }

    #[test]
    fn top_k_tie_break_prefers_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[3.0, 3.0, 3.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[1.0], 3), vec![0]);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
