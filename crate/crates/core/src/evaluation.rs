//! Segmentation metrics, precision-recall curves and the evaluation drivers
//! (click sweeps, noisy clicks, challenging subsets, decoder ablation).

use serde::{Deserialize, Serialize};

use crate::click_sim::{noisy_replacement_clicks, simulate_clicks, ClickBudget, DEFAULT_EVAL_BUDGET, MAX_BUDGET};
use crate::data::{LesionSample, Split};
use crate::error::{HfnError, Result};
use crate::hintmaps::ClickSet;
use crate::mask::Mask;
use crate::network::{Hfn, ModelParameters, NetworkConfig};
use crate::training::{self, preprocess, sample_seed, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(HfnError::ShapeMismatch(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub jaccard: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

/// `num / den`, with `0 / 0` defined as 1.
pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &ConfusionCounts) -> MetricsRecord {
    MetricsRecord {
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn mean_metrics<'a>(records: impl IntoIterator<Item = &'a MetricsRecord>) -> MetricsRecord {
    let mut sum = MetricsRecord::default();
    let mut n = 0usize;
    for r in records {
        sum.jaccard += r.jaccard;
        sum.sensitivity += r.sensitivity;
        sum.specificity += r.specificity;
        sum.accuracy += r.accuracy;
        n += 1;
    }
    let d = n.max(1) as f64;
    MetricsRecord {
        jaccard: sum.jaccard / d,
        sensitivity: sum.sensitivity / d,
        specificity: sum.specificity / d,
        accuracy: sum.accuracy / d,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

pub const PR_THRESHOLDS: usize = 256;

/// Pooled precision and recall over every pixel of every image, predicting
/// foreground where `p >= threshold` on an even grid over `[0, 1]`.
pub fn pr_curve(probabilities: &[&[f32]], gts: &[&Mask], n_thresholds: usize) -> Result<PrCurve> {
    if probabilities.len() != gts.len() {
        return Err(HfnError::ShapeMismatch(format!(
            "{} probability maps for {} masks",
            probabilities.len(),
            gts.len()
        )));
    }
    let n = n_thresholds.max(2);
    let thresholds: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
    // hist[k]: pixels whose largest threshold not above p is thresholds[k].
    let mut pos = vec![0u64; n];
    let mut neg = vec![0u64; n];
    let mut total_pos = 0u64;
    for (probs, gt) in probabilities.iter().zip(gts) {
        if probs.len() != gt.values().len() {
            return Err(HfnError::ShapeMismatch(format!(
                "probability map has {} pixels, mask has {}",
                probs.len(),
                gt.values().len()
            )));
        }
        for (&p, &g) in probs.iter().zip(gt.values()) {
            let p = p as f64;
            let mut k = ((p * (n - 1) as f64).floor().max(0.0) as usize).min(n - 1);
            while k > 0 && thresholds[k] > p {
                k -= 1;
            }
            while k + 1 < n && thresholds[k + 1] <= p {
                k += 1;
            }
            if p < thresholds[0] {
                continue;
            }
            if g == 1 {
                pos[k] += 1;
            } else {
                neg[k] += 1;
            }
        }
        total_pos += gt.count_foreground() as u64;
    }
    let mut points = vec![PrPoint { threshold: 0.0, precision: 0.0, recall: 0.0 }; n];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..n).rev() {
        tp += pos[k];
        fp += neg[k];
        points[k] = PrPoint { threshold: thresholds[k], precision: ratio(tp, tp + fp), recall: ratio(tp, total_pos) };
    }
    Ok(PrCurve { points })
}

/// The `floor(fraction * N)` lowest-scoring ids, ties broken by id.
pub fn select_challenging(scores: &[(String, f64)], fraction: f64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HfnError::InvalidFraction(fraction));
    }
    let k = (fraction * scores.len() as f64 + 1e-9).floor() as usize;
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(sorted.into_iter().take(k).map(|(id, _)| id.clone()).collect())
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub n_fg: usize,
    pub n_bg: usize,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: MetricsRecord,
}

/// Per-image rows plus per-image-mean and pooled aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ImageResult>,
    pub mean: MetricsRecord,
    pub pooled: MetricsRecord,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ImageResult>) -> Self {
        let mean = mean_metrics(rows.iter().map(|r| &r.metrics));
        let mut pooled = ConfusionCounts::default();
        for r in &rows {
            pooled.merge(&r.counts);
        }
        EvalReport { rows, mean, pooled: metrics(&pooled) }
    }
}

/// A test image after the training resize rule.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub image: image::RgbImage,
    pub mask: Mask,
}

pub fn prepare_eval_items(samples: &[LesionSample]) -> Result<Vec<EvalItem>> {
    let max_axis = TrainConfig::default().resize_max_long_axis;
    samples
        .iter()
        .map(|s| {
            let (image, mask) = preprocess(&s.image, &s.mask, max_axis)?;
            Ok(EvalItem { id: s.id.clone(), image, mask })
        })
        .collect()
}

/// Test split if present, else every sample.
pub fn test_samples(dataset: &[LesionSample]) -> Vec<LesionSample> {
    let test: Vec<LesionSample> = dataset.iter().filter(|s| s.split == Split::Test).cloned().collect();
    if test.is_empty() {
        dataset.to_vec()
    } else {
        test
    }
}

/// Segment every item with clicks from `clicks_for` and score it. Also
/// returns the probability maps in item order.
pub fn evaluate_with(
    net: &Hfn,
    params: &ModelParameters<f32>,
    items: &[EvalItem],
    mut clicks_for: impl FnMut(&EvalItem) -> Result<ClickSet>,
) -> Result<(EvalReport, Vec<Vec<f32>>)> {
    let mut rows = Vec::with_capacity(items.len());
    let mut probs = Vec::with_capacity(items.len());
    for it in items {
        let clicks = clicks_for(it)?;
        let pred = net.forward(&it.image, &clicks, params)?;
        let counts = confusion(&pred.mask, &it.mask)?;
        let (n_fg, n_bg) = clicks.counts();
        rows.push(ImageResult { id: it.id.clone(), n_fg, n_bg, counts, metrics: metrics(&counts) });
        probs.push(pred.probability);
    }
    Ok((EvalReport::from_rows(rows), probs))
}

pub fn evaluate_budget(
    net: &Hfn,
    params: &ModelParameters<f32>,
    items: &[EvalItem],
    budget: ClickBudget,
    seed: u64,
) -> Result<(EvalReport, Vec<Vec<f32>>)> {
    evaluate_with(net, params, items, |it| simulate_clicks(&it.mask, budget, sample_seed(seed, &it.id)))
}

/// Mean per-image Jaccard with `n` clean clicks per region.
pub fn mean_jaccard_at(net: &Hfn, params: &ModelParameters<f32>, samples: &[LesionSample], n: usize, seed: u64) -> Result<f64> {
    let items = prepare_eval_items(samples)?;
    Ok(evaluate_budget(net, params, &items, ClickBudget::new(n)?, seed)?.0.mean.jaccard)
}

/// Clean evaluation at (3, 3) clicks with a pooled PR curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullEvalReport {
    pub n_clicks: usize,
    pub report: EvalReport,
    pub pr_curve: PrCurve,
}

pub fn evaluate(net: &Hfn, params: &ModelParameters<f32>, samples: &[LesionSample], seed: u64) -> Result<FullEvalReport> {
    let items = prepare_eval_items(samples)?;
    let (report, probs) = evaluate_budget(net, params, &items, ClickBudget::new(DEFAULT_EVAL_BUDGET)?, seed)?;
    let prob_refs: Vec<&[f32]> = probs.iter().map(|p| p.as_slice()).collect();
    let masks: Vec<&Mask> = items.iter().map(|i| &i.mask).collect();
    let pr_curve = pr_curve(&prob_refs, &masks, PR_THRESHOLDS)?;
    Ok(FullEvalReport { n_clicks: DEFAULT_EVAL_BUDGET, report, pr_curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_clicks: usize,
    #[serde(flatten)]
    pub mean: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Rank correlation between click count and mean Jaccard.
    pub spearman_jaccard: f64,
    pub per_image: Vec<ImageResult>,
}

/// Mean metrics with accumulated clean clicks for every budget 1..=6.
pub fn click_sweep(net: &Hfn, params: &ModelParameters<f32>, samples: &[LesionSample], seed: u64) -> Result<SweepReport> {
    let items = prepare_eval_items(samples)?;
    let mut rows = Vec::with_capacity(MAX_BUDGET);
    let mut per_image = Vec::new();
    for budget in ClickBudget::all() {
        let (report, _) = evaluate_budget(net, params, &items, budget, seed)?;
        rows.push(SweepRow { n_clicks: budget.get(), mean: report.mean });
        per_image.extend(report.rows);
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n_clicks as f64).collect();
    let js: Vec<f64> = rows.iter().map(|r| r.mean.jaccard).collect();
    Ok(SweepReport { spearman_jaccard: spearman(&ns, &js), rows, per_image })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    pub noisy_fg: usize,
    pub noisy_bg: usize,
    pub total_per_region: usize,
    pub clean: MetricsRecord,
    pub noisy: MetricsRecord,
    pub rows: Vec<ImageResult>,
}

/// (3, 3) clicks with the last `noisy_fg` / `noisy_bg` replaced by noise,
/// alongside the clean (3, 3) result.
pub fn noisy_eval(
    net: &Hfn,
    params: &ModelParameters<f32>,
    samples: &[LesionSample],
    noisy_fg: usize,
    noisy_bg: usize,
    seed: u64,
) -> Result<NoisyReport> {
    let items = prepare_eval_items(samples)?;
    let total = ClickBudget::new(DEFAULT_EVAL_BUDGET)?;
    let (clean, _) = evaluate_budget(net, params, &items, total, seed)?;
    let (noisy, _) = evaluate_with(net, params, &items, |it| {
        noisy_replacement_clicks(&it.mask, total, noisy_fg, noisy_bg, sample_seed(seed, &it.id))
    })?;
    Ok(NoisyReport {
        noisy_fg,
        noisy_bg,
        total_per_region: total.get(),
        clean: clean.mean,
        noisy: noisy.mean,
        rows: noisy.rows,
    })
}

/// Parameters with both hint projections zeroed: the image-only baseline.
pub fn hint_free_params(params: &ModelParameters<f32>) -> ModelParameters<f32> {
    let mut p = params.clone();
    p.zero_prefix("encoder.fg_proj");
    p.zero_prefix("encoder.bg_proj");
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChallengingReport {
    pub fraction: f64,
    pub ids: Vec<String>,
    /// Scores of the hint-free baseline that produced the ranking.
    pub baseline: Vec<(String, f64)>,
    pub hfn: EvalReport,
}

/// Rank test images by the hint-free baseline's Jaccard and report the
/// network with clicks on the lowest `fraction`.
pub fn challenging_subset(
    net: &Hfn,
    params: &ModelParameters<f32>,
    samples: &[LesionSample],
    fraction: f64,
    seed: u64,
) -> Result<ChallengingReport> {
    let items = prepare_eval_items(samples)?;
    let budget = ClickBudget::new(DEFAULT_EVAL_BUDGET)?;
    let baseline_params = hint_free_params(params);
    let (base, _) = evaluate_budget(net, &baseline_params, &items, budget, seed)?;
    let scores: Vec<(String, f64)> = base.rows.iter().map(|r| (r.id.clone(), r.metrics.jaccard)).collect();
    let ids = select_challenging(&scores, fraction)?;
    let subset: Vec<EvalItem> = items.into_iter().filter(|i| ids.contains(&i.id)).collect();
    let (hfn, _) = evaluate_budget(net, params, &subset, budget, seed)?;
    Ok(ChallengingReport { fraction, ids, baseline: scores, hfn })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_him: EvalReport,
    pub without_him: EvalReport,
    pub history_with: TrainHistory,
    pub history_without: TrainHistory,
}

/// Train with and without the integration modules under identical seeds and
/// evaluate both at (3, 3) clicks on the test split.
pub fn ablation_him(dataset: &[LesionSample], net_config: &NetworkConfig, train_config: &TrainConfig) -> Result<AblationReport> {
    let test = test_samples(dataset);
    let items = prepare_eval_items(&test)?;
    let budget = ClickBudget::new(DEFAULT_EVAL_BUDGET)?;
    let run = |cfg: NetworkConfig| -> Result<(EvalReport, TrainHistory)> {
        let (params, history) = training::train(dataset, &cfg, train_config)?;
        let net = Hfn::new(cfg)?;
        Ok((evaluate_budget(&net, &params, &items, budget, train_config.seed)?.0, history))
    };
    let with = NetworkConfig { use_him: true, ..net_config.clone() };
    let (with_him, history_with) = run(with)?;
    let (without_him, history_without) = run(net_config.clone().without_him())?;
    Ok(AblationReport { with_him, without_him, history_with, history_without })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_metrics() {
        let m = metrics(&ConfusionCounts { tp: 6, fp: 2, fn_: 2, tn: 10 });
        assert!((m.jaccard - 0.6).abs() < 1e-15);
        assert!((m.sensitivity - 0.75).abs() < 1e-15);
        assert!((m.specificity - 10.0 / 12.0).abs() < 1e-15);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_over_zero_is_one() {
        let m = metrics(&ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 0 });
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.jaccard, 1.0);
    }

    #[test]
    fn identical_and_complement() {
        let a = Mask::from_fn(5, 5, |y, x| y < x);
        let c = confusion(&a, &a).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&a.complement(), &a).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&a, &Mask::zeros(5, 4)).is_err());
    }

    #[test]
    fn challenging_selection() {
        let scores: Vec<(String, f64)> = (0..10).map(|i| (format!("im{i}"), [0.9, 0.2, 0.8, 0.1, 0.5, 0.6, 0.7, 0.95, 0.3, 0.4][i])).collect();
        assert_eq!(select_challenging(&scores, 0.2).unwrap(), vec!["im3", "im1"]);
        assert_eq!(select_challenging(&scores, 1.0).unwrap().len(), 10);
        assert!(select_challenging(&scores, 0.0).is_err());
        assert!(select_challenging(&scores, 1.5).is_err());
        let ties = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.9)];
        assert_eq!(select_challenging(&ties, 0.34).unwrap(), vec!["a"]);
    }

    #[test]
    fn pr_edges() {
        let gt = Mask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let p = [0.9f32, 0.1, 0.6, 0.4];
        let c = pr_curve(&[&p], &[&gt], 256).unwrap();
        assert_eq!(c.points.len(), 256);
        assert_eq!(c.points[0].threshold, 0.0);
        assert_eq!(c.points[0].recall, 1.0);
        assert_eq!(c.points[0].precision, 0.5);
        let last = c.points.last().unwrap();
        assert_eq!((last.threshold, last.precision, last.recall), (1.0, 1.0, 0.0));
        assert!(c.points.windows(2).all(|w| w[0].threshold < w[1].threshold && w[0].recall >= w[1].recall));
    }

    #[test]
    fn spearman_reference() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 0.0);
    }
}
