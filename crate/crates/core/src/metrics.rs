//! Binary classification metrics evaluated with each class as positive in
//! turn, ROC curves with trapezoidal AUC, and bias-corrected EMA smoothing.

use std::fmt::Write as _;

use crate::error::{ensure, Result};

/// Accuracy, precision, recall and F1 for one choice of positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf1 {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No sample was predicted positive; precision is reported as 0.
    pub precision_undefined: bool,
    /// No sample is actually positive; recall is reported as 0.
    pub recall_undefined: bool,
}

pub fn prf1(preds: &[usize], labels: &[usize], positive: usize) -> Result<Prf1> {
    ensure!(
        preds.len() == labels.len(),
        "{} predictions for {} labels",
        preds.len(),
        labels.len()
    );
    ensure!(!labels.is_empty(), "metrics need at least one sample");
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        correct += (p == l) as usize;
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 {
        accuracy: correct as f64 / labels.len() as f64,
        precision,
        recall,
        f1,
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    })
}

/// Column-wise mean of the two treatment rows.
pub fn swap_average(a: &Prf1, b: &Prf1) -> Prf1 {
    Prf1 {
        accuracy: (a.accuracy + b.accuracy) / 2.0,
        precision: (a.precision + b.precision) / 2.0,
        recall: (a.recall + b.recall) / 2.0,
        f1: (a.f1 + b.f1) / 2.0,
        precision_undefined: a.precision_undefined || b.precision_undefined,
        recall_undefined: a.recall_undefined || b.recall_undefined,
    }
}

/// ROC points `(FPR, TPR)` sorted by FPR, from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

/// Sweeps a threshold over `+∞`, every distinct score in descending order, and
/// `−∞`; a sample is called positive when its score is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[usize], positive: usize) -> Result<RocCurve> {
    ensure!(scores.len() == labels.len(), "{} scores for {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| s.is_finite()), "ROC scores must be finite");
    let pos = labels.iter().filter(|&&l| l == positive).count();
    let neg = labels.len() - pos;
    ensure!(pos > 0 && neg > 0, "ROC needs both positive and negative samples");

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    points.push((1.0, 1.0));
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// TPR at `fpr` by linear interpolation; at a vertical segment the highest TPR.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let p = &self.points;
        let at: Vec<f64> = p.iter().filter(|q| q.0 == fpr).map(|q| q.1).collect();
        if let Some(max) = at.into_iter().reduce(f64::max) {
            return max;
        }
        match p.windows(2).find(|w| w[0].0 < fpr && fpr < w[1].0) {
            Some(w) => w[0].1 + (w[1].1 - w[0].1) * (fpr - w[0].0) / (w[1].0 - w[0].0),
            None => p.last().map_or(0.0, |q| q.1),
        }
    }
}

/// Number of points in the common FPR grid, `0.00, 0.01, …, 1.00`.
pub const ROC_GRID_POINTS: usize = 101;

/// Pointwise mean of two curves resampled on the common FPR grid.
pub fn average_roc(a: &RocCurve, b: &RocCurve) -> RocCurve {
    let points = (0..ROC_GRID_POINTS)
        .map(|i| {
            let f = i as f64 / (ROC_GRID_POINTS - 1) as f64;
            (f, (a.tpr_at(f) + b.tpr_at(f)) / 2.0)
        })
        .collect();
    RocCurve { points }
}

/// Bias-corrected exponential moving average, computed in the equivalent
/// incremental form `c_t = c_{t−1} + w_t·(x_t − c_{t−1})`, `w_t = (1−β)/(1−βᵗ)`,
/// which keeps constant series exactly constant.
pub fn ema_corrected(series: &[f64], beta: f64) -> Result<Vec<f64>> {
    ensure!(beta > 0.0 && beta < 1.0, "EMA beta must lie in (0, 1), got {beta}");
    let mut out = Vec::with_capacity(series.len());
    let mut c = 0.0;
    let mut beta_t = 1.0;
    for &x in series {
        beta_t *= beta;
        let w = (1.0 - beta) / (1.0 - beta_t);
        c += w * (x - c);
        out.push(c);
    }
    Ok(out)
}

pub const DEFAULT_EMA_BETA: f64 = 0.9;

/// Both treatments of a binary evaluation, their average, and ROC curves.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub fatigue_pos: Prf1,
    pub alert_pos: Prf1,
    pub average: Prf1,
    pub roc_fatigue: RocCurve,
    pub roc_alert: RocCurve,
    pub roc_average: RocCurve,
}

/// Class index of the fatigued group in binary labels.
pub const FATIGUE: usize = 1;
pub const ALERT: usize = 0;

impl MetricsReport {
    /// `fatigue_scores` rank samples by fatigue; alert-positive ROC uses their negation.
    pub fn new(preds: &[usize], labels: &[usize], fatigue_scores: &[f64]) -> Result<Self> {
        ensure!(
            labels.iter().chain(preds).all(|&l| l == FATIGUE || l == ALERT),
            "metrics labels must be binary"
        );
        let fatigue_pos = prf1(preds, labels, FATIGUE)?;
        let alert_pos = prf1(preds, labels, ALERT)?;
        let roc_fatigue = roc_curve(fatigue_scores, labels, FATIGUE)?;
        let negated: Vec<f64> = fatigue_scores.iter().map(|s| -s).collect();
        let roc_alert = roc_curve(&negated, labels, ALERT)?;
        Ok(Self {
            samples: labels.len(),
            average: swap_average(&fatigue_pos, &alert_pos),
            roc_average: average_roc(&roc_fatigue, &roc_alert),
            fatigue_pos,
            alert_pos,
            roc_fatigue,
            roc_alert,
        })
    }

    /// `key<TAB>value` lines followed by one CSV block per curve.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k}\t{v}").expect("writing to a String");
        kv("samples", self.samples.to_string());
        for (ns, row) in [
            ("fatigue_pos", &self.fatigue_pos),
            ("alert_pos", &self.alert_pos),
            ("average", &self.average),
        ] {
            kv(&format!("{ns}.accuracy"), format!("{:.6}", row.accuracy));
            kv(&format!("{ns}.precision"), format!("{:.6}", row.precision));
            kv(&format!("{ns}.recall"), format!("{:.6}", row.recall));
            kv(&format!("{ns}.f1"), format!("{:.6}", row.f1));
            kv(&format!("{ns}.precision_undefined"), row.precision_undefined.to_string());
            kv(&format!("{ns}.recall_undefined"), row.recall_undefined.to_string());
        }
        kv("fatigue_pos.auc", format!("{:.6}", self.roc_fatigue.auc()));
        kv("alert_pos.auc", format!("{:.6}", self.roc_alert.auc()));
        kv("average.auc", format!("{:.6}", self.roc_average.auc()));
        for (name, curve) in [
            ("roc.fatigue_pos", &self.roc_fatigue),
            ("roc.alert_pos", &self.roc_alert),
            ("roc.average", &self.roc_average),
        ] {
            writeln!(out, "\n[{name}]\nfpr,tpr").expect("writing to a String");
            for (f, t) in &curve.points {
                writeln!(out, "{f:.6},{t:.6}").expect("writing to a String");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// P(score_pos > score_neg) + ½·P(tie) over all positive/negative pairs.
    fn mann_whitney(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn prf1_examples() {
        let perfect = prf1(&[1, 0, 1], &[1, 0, 1], 1).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));
        let wrong = prf1(&[0, 1, 0, 1], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!((wrong.accuracy, wrong.f1), (0.0, 0.0));
        let half = prf1(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!((half.accuracy, half.precision, half.recall, half.f1), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn undefined_ratios_are_zero_and_flagged() {
        let r = prf1(&[0, 0], &[1, 0], 1).unwrap();
        assert!(r.precision_undefined && !r.recall_undefined);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = prf1(&[1, 0], &[0, 0], 1).unwrap();
        assert!(r.recall_undefined);
    }

    #[test]
    fn swapping_the_positive_class_exchanges_roles() {
        let (preds, labels) = ([1, 1, 0, 0, 1, 0, 0], [1, 0, 0, 0, 1, 1, 0]);
        let a = prf1(&preds, &labels, 1).unwrap();
        let b = prf1(&preds, &labels, 0).unwrap();
        // Precision with class 0 positive is the negative predictive value of class 1.
        let tn = preds.iter().zip(&labels).filter(|(p, l)| **p == 0 && **l == 0).count() as f64;
        let pred_neg = preds.iter().filter(|p| **p == 0).count() as f64;
        let actual_neg = labels.iter().filter(|l| **l == 0).count() as f64;
        assert_eq!(b.precision, tn / pred_neg);
        assert_eq!(b.recall, tn / actual_neg);
        assert_eq!(a.accuracy, b.accuracy);
    }

    #[test]
    fn identical_rows_average_to_themselves() {
        let r = prf1(&[1, 1, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(swap_average(&r, &r), r);
    }

    #[test]
    fn roc_examples() {
        let labels = [1, 1, 0, 0];
        assert_eq!(roc_curve(&[0.9, 0.8, 0.2, 0.1], &labels, 1).unwrap().auc(), 1.0);
        let flat = roc_curve(&[0.5; 4], &labels, 1).unwrap();
        assert_eq!(flat.auc(), 0.5);
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0), (1.0, 1.0)]);
        assert!(roc_curve(&[0.1, 0.2], &[1, 1], 1).is_err());
        assert!(roc_curve(&[f64::NAN, 0.2], &[1, 0], 1).is_err());
    }

    #[test]
    fn six_sample_auc_matches_pair_counting() {
        let scores = [0.9, 0.4, 0.4, 0.7, 0.1, 0.4];
        let labels = [1, 1, 0, 0, 0, 1];
        let roc = roc_curve(&scores, &labels, 1).unwrap();
        assert!((roc.auc() - mann_whitney(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn average_roc_examples() {
        let perfect = roc_curve(&[1.0, 0.0], &[1, 0], 1).unwrap();
        let diagonal = roc_curve(&[0.5, 0.5], &[1, 0], 1).unwrap();
        let avg = average_roc(&perfect, &diagonal);
        assert_eq!(avg.points.len(), 101);
        for &(f, t) in &avg.points {
            assert!((t - (1.0 + f) / 2.0).abs() < 1e-12, "f {f} t {t}");
        }
        let same = average_roc(&perfect, &perfect);
        assert!(same.points.iter().all(|&(_, t)| t == 1.0));
    }

    #[test]
    fn ema_examples() {
        let out = ema_corrected(&[1.0, 2.0, 3.0], 0.9).unwrap();
        assert_eq!(out[0], 1.0);
        // m₂ = 0.29, m₃ = 0.561; divided by 1 − 0.9ᵗ.
        assert!((out[1] - 0.29 / 0.19).abs() < 1e-12);
        assert!((out[2] - 0.561 / 0.271).abs() < 1e-12);
        assert!(ema_corrected(&[1.0], 1.0).is_err());
        assert!(ema_corrected(&[1.0], 0.0).is_err());
    }

    #[test]
    fn report_text_has_namespaced_keys() {
        let report = MetricsReport::new(&[1, 0, 1, 0], &[1, 0, 0, 0], &[0.9, 0.1, 0.6, 0.3]).unwrap();
        let text = report.to_text();
        assert!(text.contains("fatigue_pos.f1\t"));
        assert!(text.contains("alert_pos.precision\t"));
        assert!(text.contains("[roc.average]\nfpr,tpr\n"));
        assert_eq!(report.roc_average.points.len(), 101);
    }

    proptest! {
        #[test]
        fn auc_equals_mann_whitney(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 2..50),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 11.0).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, l)| *l as usize).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let roc = roc_curve(&scores, &labels, 1).unwrap();
            prop_assert!((roc.auc() - mann_whitney(&scores, &labels)).abs() < 1e-9);
        }

        #[test]
        fn constant_series_stays_constant(c in -1e6f64..1e6, n in 1usize..50, beta in 0.01f64..0.99) {
            let out = ema_corrected(&vec![c; n], beta).unwrap();
            prop_assert!(out.iter().all(|&v| v == c));
        }

        #[test]
        fn averaged_auc_lies_between_inputs(
            a in prop::collection::vec((0u8..20, any::<bool>()), 4..40),
            b in prop::collection::vec((0u8..20, any::<bool>()), 4..40),
        ) {
            let split = |v: &[(u8, bool)]| -> (Vec<f64>, Vec<usize>) {
                (v.iter().map(|(s, _)| *s as f64).collect(), v.iter().map(|(_, l)| *l as usize).collect())
            };
            let ((sa, la), (sb, lb)) = (split(&a), split(&b));
            prop_assume!(la.contains(&0) && la.contains(&1) && lb.contains(&0) && lb.contains(&1));
            let (ra, rb) = (roc_curve(&sa, &la, 1).unwrap(), roc_curve(&sb, &lb, 1).unwrap());
            let avg = average_roc(&ra, &rb).auc();
            let (lo, hi) = (ra.auc().min(rb.auc()), ra.auc().max(rb.auc()));
            // Resampling on a 0.01 grid moves each area by at most one grid step.
            prop_assert!(avg >= lo - 0.01 && avg <= hi + 0.01, "avg {avg} not in [{lo}, {hi}]");
        }
    }
}
