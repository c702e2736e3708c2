//! Utility and privacy metrics and the trade-off report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_text, write_file};
use crate::error::{Error, Result};

/// Repeats each segment score over its `clip_len` frames; the trailing
/// `T - clip_len * S` frames take the last segment's score.
pub fn segments_to_frames(segment_scores: &[f64], clip_len: usize, frames: usize) -> Result<Vec<f64>> {
    let s = segment_scores.len();
    if s == 0 {
        return Err(Error::EmptyInput("no segment scores".into()));
    }
    if clip_len == 0 || s * clip_len > frames || frames >= (s + 1) * clip_len {
        return Err(Error::Shape(format!(
            "{s} segments of {clip_len} frames do not tile a video of {frames} frames"
        )));
    }
    Ok((0..frames).map(|t| segment_scores[(t / clip_len).min(s - 1)]).collect())
}

fn check_pairs(scores: &[f64], labels: &[bool], what: &str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{what}: {} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite score {v}")));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive scores above a random negative, ties counting 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels, "roc_auc")?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "roc_auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, with tied groups sharing their mean rank.
    let mut twice_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mean_rank = (i + 1 + j + 1) as u64;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += group_pos * twice_mean_rank;
        i = j + 1;
    }
    let p = pos as u64;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * neg as u64) as f64)
}

/// Non-interpolated average precision over the descending-score ranking.
/// Tied scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_pairs(scores, labels, "average_precision")?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average_precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmapResult {
    pub value: f64,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Mean over attribute classes of per-class average precision; `scores` and
/// `targets` are `N` rows of `A` values. Classes with no positive are left
/// out of the mean and counted in `excluded`.
pub fn cmap(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<CmapResult> {
    if scores.len() != targets.len() || scores.is_empty() {
        return Err(Error::Shape(format!("cmap: {} score rows vs {} target rows", scores.len(), targets.len())));
    }
    let a = scores[0].len();
    if scores.iter().any(|r| r.len() != a) || targets.iter().any(|r| r.len() != a) {
        return Err(Error::Shape("cmap: ragged rows".into()));
    }
    let mut per_class = Vec::with_capacity(a);
    for k in 0..a {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let lab: Vec<bool> = targets.iter().map(|r| r[k]).collect();
        per_class.push(if lab.contains(&true) {
            Some(average_precision(&col, &lab)?)
        } else {
            None
        });
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    let excluded = a - included.len();
    if excluded > 0 {
        log::warn!("cmap: {excluded} of {a} classes have no positives and are excluded");
    }
    if included.is_empty() {
        return Err(Error::UndefinedMetric("cmap: no class has a positive".into()));
    }
    Ok(CmapResult {
        value: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
        excluded,
    })
}

/// Per-frame scores and ground truth of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreTrace {
    pub scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl AnomalyScoreTrace {
    pub fn new(scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        check_pairs(&scores, &truth, "score trace")?;
        Ok(Self { scores, truth })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Frame-level ROC AUC pooled over videos.
pub fn frame_level_auc(traces: &[AnomalyScoreTrace]) -> Result<f64> {
    let scores: Vec<f64> = traces.iter().flat_map(|t| t.scores.iter().copied()).collect();
    let truth: Vec<bool> = traces.iter().flat_map(|t| t.truth.iter().copied()).collect();
    roc_auc(&scores, &truth)
}

/// Frame-level average precision pooled over videos.
pub fn frame_level_ap(traces: &[AnomalyScoreTrace]) -> Result<f64> {
    let scores: Vec<f64> = traces.iter().flat_map(|t| t.scores.iter().copied()).collect();
    let truth: Vec<bool> = traces.iter().flat_map(|t| t.truth.iter().copied()).collect();
    average_precision(&scores, &truth)
}

/// Writes `frame,score,raw_score,truth`; `raw_score` is empty without a raw trace.
pub fn plot_score_trace(path: &Path, trace: &AnomalyScoreTrace, raw: Option<&[f64]>) -> Result<()> {
    if let Some(r) = raw {
        if r.len() != trace.len() {
            return Err(Error::Shape(format!("raw trace has {} frames, expected {}", r.len(), trace.len())));
        }
    }
    let mut out = String::from("frame,score,raw_score,truth\n");
    for t in 0..trace.len() {
        let raw_cell = raw.map(|r| format!("{:?}", r[t])).unwrap_or_default();
        writeln!(out, "{t},{:?},{raw_cell},{}", trace.scores[t], u8::from(trace.truth[t])).unwrap();
    }
    write_file(path, out.as_bytes())
}

/// Reads a file written by [`plot_score_trace`].
pub fn read_score_trace(path: &Path) -> Result<(AnomalyScoreTrace, Option<Vec<f64>>)> {
    let text = read_text(path)?;
    let bad = |d: String| Error::format(path, d);
    let mut lines = text.lines();
    if lines.next() != Some("frame,score,raw_score,truth") {
        return Err(bad("missing header".into()));
    }
    let (mut scores, mut raw, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 || cells[0] != i.to_string() {
            return Err(bad(format!("bad row {i}: `{line}`")));
        }
        scores.push(cells[1].parse::<f64>().map_err(|e| bad(e.to_string()))?);
        if !cells[2].is_empty() {
            raw.push(cells[2].parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
        truth.push(match cells[3] {
            "0" => false,
            "1" => true,
            c => return Err(bad(format!("truth must be 0 or 1, got `{c}`"))),
        });
    }
    let raw = match raw.len() {
        0 => None,
        n if n == scores.len() => Some(raw),
        _ => return Err(bad("raw_score column partially filled".into())),
    };
    Ok((AnomalyScoreTrace::new(scores, truth)?, raw))
}

/// Minimal SVG line plot of a trace with the anomalous frames shaded.
pub fn render_score_svg(trace: &AnomalyScoreTrace, raw: Option<&[f64]>) -> String {
    let (w, h) = (600.0, 200.0);
    let n = trace.len().max(2) as f64 - 1.0;
    let px = |t: usize| t as f64 / n * w;
    let py = |s: f64| (1.0 - s.clamp(0.0, 1.0)) * h;
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for (t, _) in trace.truth.iter().enumerate().filter(|(_, &a)| a) {
        writeln!(svg, "<rect x=\"{:.2}\" y=\"0\" width=\"{:.2}\" height=\"{h}\" fill=\"#f4cccc\"/>", px(t), w / n).unwrap();
    }
    let line = |s: &[f64], colour: &str| {
        let pts: Vec<String> = s.iter().enumerate().map(|(t, &v)| format!("{:.2},{:.2}", px(t), py(v))).collect();
        format!("<polyline fill=\"none\" stroke=\"{colour}\" points=\"{}\"/>\n", pts.join(" "))
    };
    if let Some(r) = raw {
        svg.push_str(&line(r, "#999999"));
    }
    svg.push_str(&line(&trace.scores, "#cc0000"));
    svg.push_str("</svg>\n");
    svg
}

/// `100 * (method - raw) / raw`.
pub fn relative_change(method: f64, raw: f64) -> f64 {
    100.0 * (method - raw) / raw
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    /// Privacy attack cMAP (lower is more private).
    pub cmap: f64,
    /// Anomaly AUC or AP (higher is more useful).
    pub utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub method: String,
    pub cmap: f64,
    pub utility: f64,
    pub cmap_change_pct: f64,
    pub utility_change_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub utility_metric: String,
    pub rows: Vec<TradeoffRow>,
}

pub const RAW_METHOD: &str = "raw";

/// Rows for the raw baseline first, then every other method in input order.
pub fn build_tradeoff_report(results: &[MethodResult], utility_metric: &str) -> Result<TradeoffReport> {
    let raw = results
        .iter()
        .find(|r| r.method == RAW_METHOD)
        .ok_or_else(|| Error::Config(format!("trade-off report needs a `{RAW_METHOD}` row")))?;
    let row = |r: &MethodResult| TradeoffRow {
        method: r.method.clone(),
        cmap: r.cmap,
        utility: r.utility,
        cmap_change_pct: relative_change(r.cmap, raw.cmap),
        utility_change_pct: relative_change(r.utility, raw.utility),
    };
    let mut rows = vec![row(raw)];
    rows.extend(results.iter().filter(|r| r.method != RAW_METHOD).map(row));
    Ok(TradeoffReport {
        utility_metric: utility_metric.to_string(),
        rows,
    })
}

impl TradeoffReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("method,cmap,{0},cmap_change_pct,{0}_change_pct\n", self.utility_metric);
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.4},{:.4},{:.2},{:.2}",
                r.method, r.cmap, r.utility, r.cmap_change_pct, r.utility_change_pct
            )
            .unwrap();
        }
        s
    }

    /// Privacy on x, utility on y.
    pub fn plot_data(&self) -> String {
        let mut s = format!("method,privacy_cmap,{}\n", self.utility_metric);
        for r in &self.rows {
            writeln!(s, "{},{:?},{:?}", r.method, r.cmap, r.utility).unwrap();
        }
        s
    }

    /// Writes `report.csv`, `report.json` and `tradeoff_plot.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("report.csv"), self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        write_file(&dir.join("report.json"), json.as_bytes())?;
        write_file(&dir.join("tradeoff_plot.csv"), self.plot_data().as_bytes())
    }
}

/// One metric value with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub checkpoint_hash: String,
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(records).expect("metrics serialize");
    write_file(path, json.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_expansion() {
        let f = segments_to_frames(&[0.1, 0.9], 16, 32).unwrap();
        assert_eq!(&f[..16], &[0.1; 16]);
        assert_eq!(&f[16..], &[0.9; 16]);
        let f = segments_to_frames(&[0.1, 0.9], 16, 35).unwrap();
        assert_eq!(&f[32..], &[0.9; 3]);
        assert!(matches!(segments_to_frames(&[], 16, 10), Err(Error::EmptyInput(_))));
        assert!(segments_to_frames(&[0.5], 16, 32).is_err());
        assert!(segments_to_frames(&[0.5, 0.5], 16, 31).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(roc_auc(&[f64::NAN, 0.2], &[true, false]), Err(Error::Numeric(_))));
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(), 0.25);
        // Ties keep input order: the positive listed second ranks second.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0.5], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn cmap_cases() {
        let s = vec![vec![0.9, 0.9], vec![0.1, 0.8], vec![0.2, 0.1]];
        let perfect = vec![vec![true, true], vec![false, true], vec![false, false]];
        assert_eq!(cmap(&s, &perfect).unwrap().value, 1.0);
        // Class 1: positive ranked 2nd of 3 -> AP 0.5.
        let t = vec![vec![true, false], vec![false, true], vec![false, false]];
        let r = cmap(&s, &t).unwrap();
        assert_eq!(r.value, 0.75);
        let t = vec![vec![true, false], vec![false, false], vec![false, false]];
        let r = cmap(&s, &t).unwrap();
        assert_eq!((r.excluded, r.per_class[1]), (1, None));
    }

    #[test]
    fn report_changes() {
        let rows = vec![
            MethodResult { method: "ours".into(), cmap: 42.21, utility: 74.81 },
            MethodResult { method: RAW_METHOD.into(), cmap: 62.30, utility: 77.68 },
        ];
        let r = build_tradeoff_report(&rows, "auc").unwrap();
        assert_eq!(r.rows[0].method, RAW_METHOD);
        assert_eq!((r.rows[0].cmap_change_pct, r.rows[0].utility_change_pct), (0.0, 0.0));
        assert_eq!(format!("{:.2}", r.rows[1].cmap_change_pct), "-32.25");
        assert_eq!(format!("{:.2}", r.rows[1].utility_change_pct), "-3.69");
        assert!(build_tradeoff_report(&rows[..1], "auc").is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let scores: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let truth: Vec<bool> = (0..100).map(|i| (40..60).contains(&i)).collect();
        let raw: Vec<f64> = scores.iter().map(|s| s / 3.0).collect();
        let trace = AnomalyScoreTrace::new(scores, truth).unwrap();
        plot_score_trace(&path, &trace, Some(&raw)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 101);
        let (back, back_raw) = read_score_trace(&path).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back_raw.unwrap(), raw);
        plot_score_trace(&path, &trace, None).unwrap();
        assert_eq!(read_score_trace(&path).unwrap().1, None);
        assert!(plot_score_trace(&path, &trace, Some(&raw[..5])).is_err());
        assert!(render_score_svg(&trace, Some(&raw)).starts_with("<svg"));
    }
}
