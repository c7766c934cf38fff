//! Prediction heads and losses: a sigmoid regression head trained with MSE,
//! and a softmax head whose class probabilities are also mapped to a
//! continuous score by taking the expectation over bin midpoints.

use crate::error::{ensure, Result};
use crate::ops::{sigmoid, softmax};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Floor applied to probabilities inside the cross-entropy logarithm.
pub const LOG_FLOOR: f32 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Continuous,
    Categorical,
}

impl std::str::FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "categorical" => Ok(Self::Categorical),
            other => Err(format!("unknown head {other:?} (expected continuous|categorical)")),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Continuous => "continuous",
            Self::Categorical => "categorical",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub alpha: f32,
    /// Number of ordered fatigue bins.
    pub k: usize,
    pub head: HeadKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            k: 2,
            head: HeadKind::Categorical,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0, "alpha must be nonnegative, got {}", self.alpha);
        ensure!(self.k >= 2, "k must be at least 2, got {}", self.k);
        Ok(())
    }

    /// Width of the final linear layer.
    pub fn output_width(&self) -> usize {
        match self.head {
            HeadKind::Continuous => 1,
            HeadKind::Categorical => self.k,
        }
    }
}

/// Continuous label in `[0,1]` and its equal-width bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelPair {
    pub continuous: f32,
    pub categorical: usize,
}

/// Equal-width bin of a continuous value, with 1.0 clamped into the top bin.
pub fn bin_of(continuous: f32, k: usize) -> usize {
    ((continuous * k as f32).floor().max(0.0) as usize).min(k - 1)
}

/// Maps a mean rating in `[1, 5]` to a continuous label and its bin.
pub fn normalize_labels(mean_rating: f32, k: usize) -> Result<LabelPair> {
    ensure!(
        (1.0..=5.0).contains(&mean_rating),
        "rating {mean_rating} outside [1, 5]"
    );
    ensure!(k >= 2, "k must be at least 2, got {k}");
    let continuous = (mean_rating - 1.0) / 4.0;
    Ok(LabelPair {
        continuous,
        categorical: bin_of(continuous, k),
    })
}

/// Whether bin `class` of `k` counts as fatigued: the upper half of the bins.
pub fn is_fatigued(class: usize, k: usize) -> bool {
    2 * class >= k
}

/// Bin midpoints `(2i+1)/(2k)`, `i = 0..k`.
pub fn bin_midpoints(k: usize) -> Vec<f32> {
    (0..k).map(|i| (2 * i + 1) as f32 / (2 * k) as f32).collect()
}

/// Probability-weighted mean of bin midpoints.
pub fn expectation_transform(q: &[f32]) -> Result<f32> {
    ensure!(q.len() >= 2, "expectation_transform needs at least 2 classes");
    ensure!(
        q.iter().all(|&p| p >= 0.0 && p.is_finite()),
        "expectation_transform: probabilities must be finite and nonnegative"
    );
    let total: f64 = q.iter().map(|&p| p as f64).sum();
    ensure!(
        (total - 1.0).abs() <= 1e-5,
        "expectation_transform: probabilities sum to {total}, not 1"
    );
    Ok(q
        .iter()
        .zip(bin_midpoints(q.len()))
        .map(|(&p, m)| p as f64 * m as f64)
        .sum::<f64>() as f32)
}

/// Differentiable expectation transform of `q: N×k`, returning `N`.
pub fn expectation<'t>(q: Var<'t>) -> Result<Var<'t>> {
    let s = q.shape();
    ensure!(s.len() == 2, "expectation: q must be N×k, got {s:?}");
    let mids = Tensor::from_parts(vec![s[1], 1], bin_midpoints(s[1]));
    q.matmul(q.tape().constant(mids))?.reshape(&[s[0]])
}

/// `mean((sigmoid(logit) − target)²)` for logits of shape `N` or `N×1`.
pub fn loss_continuous<'t>(pred_logit: Var<'t>, targets: &[f32]) -> Result<Var<'t>> {
    let n = pred_logit.value().numel();
    ensure!(
        targets.len() == n,
        "loss_continuous: {} targets for {n} predictions",
        targets.len()
    );
    ensure!(
        targets.iter().all(|t| (0.0..=1.0).contains(t)),
        "loss_continuous: targets must lie in [0, 1]"
    );
    let y = pred_logit.tape().constant(Tensor::from_parts(vec![n], targets.to_vec()));
    Ok(pred_logit.reshape(&[n])?.sigmoid().sub(y)?.square().mean())
}

/// Component values of a loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    /// Cross-entropy term (before the α weight); zero for the continuous head.
    pub cross_entropy: f32,
    pub mse: f32,
}

/// `α·CE + MSE(y, E(q))` with `q = softmax(logits)` over `N×k` logits.
///
/// With `α = 0` the cross-entropy term is evaluated for reporting only and
/// contributes nothing to the graph.
pub fn loss_combined<'t>(logits: Var<'t>, labels: &[LabelPair], cfg: &LossConfig) -> Result<(Var<'t>, LossBreakdown)> {
    cfg.validate()?;
    ensure!(cfg.head == HeadKind::Categorical, "loss_combined requires the categorical head");
    let s = logits.shape();
    ensure!(
        s.len() == 2 && s[1] == cfg.k,
        "loss_combined: logits must be N×{}, got {s:?}",
        cfg.k
    );
    let n = s[0];
    ensure!(labels.len() == n, "loss_combined: {} labels for batch of {n}", labels.len());
    ensure!(
        labels.iter().all(|l| l.categorical < cfg.k && (0.0..=1.0).contains(&l.continuous)),
        "loss_combined: label out of range"
    );
    let tape = logits.tape();
    let q = logits.softmax(1)?;

    let mut onehot = Tensor::zeros(&[n, cfg.k]);
    for (j, l) in labels.iter().enumerate() {
        onehot.set(&[j, l.categorical], 1.0);
    }
    let ce = q
        .log_clamped(LOG_FLOOR)
        .mul(tape.constant(onehot))?
        .sum()
        .scale(-1.0 / n as f32);

    let y = tape.constant(Tensor::from_parts(vec![n], labels.iter().map(|l| l.continuous).collect()));
    let mse = y.sub(expectation(q)?)?.square().mean();

    let total = if cfg.alpha == 0.0 {
        mse
    } else {
        ce.scale(cfg.alpha).add(mse)?
    };
    let breakdown = LossBreakdown {
        total: total.item(),
        cross_entropy: ce.item(),
        mse: mse.item(),
    };
    Ok((total, breakdown))
}

/// Loss for whichever head `cfg` selects.
pub fn head_loss<'t>(logits: Var<'t>, labels: &[LabelPair], cfg: &LossConfig) -> Result<(Var<'t>, LossBreakdown)> {
    match cfg.head {
        HeadKind::Categorical => loss_combined(logits, labels, cfg),
        HeadKind::Continuous => {
            let targets: Vec<f32> = labels.iter().map(|l| l.continuous).collect();
            let loss = loss_continuous(logits, &targets)?;
            let v = loss.item();
            Ok((
                loss,
                LossBreakdown {
                    total: v,
                    cross_entropy: 0.0,
                    mse: v,
                },
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    /// Continuous fatigue estimate in `(0, 1)`.
    pub continuous: f32,
    pub class: usize,
}

/// Per-sample predictions from head outputs of shape `N×width`.
///
/// Categorical: argmax class (ties to the lower index) plus the expectation
/// transform. Continuous: sigmoid score and its bin.
pub fn predict(logits: &Tensor, cfg: &LossConfig) -> Result<Vec<Prediction>> {
    ensure!(
        logits.rank() == 2 && logits.shape()[1] == cfg.output_width(),
        "predict: logits {:?} do not match head width {}",
        logits.shape(),
        cfg.output_width()
    );
    match cfg.head {
        HeadKind::Categorical => {
            let q = softmax(logits, 1)?;
            q.data().chunks(cfg.k).map(|row| predict_from_probs(row)).collect()
        }
        HeadKind::Continuous => Ok(logits
            .data()
            .iter()
            .map(|&z| {
                let p = sigmoid(z);
                Prediction {
                    continuous: p,
                    class: bin_of(p, cfg.k),
                }
            })
            .collect()),
    }
}

/// Argmax (lowest index on ties) and expectation of one probability vector.
pub fn predict_from_probs(q: &[f32]) -> Result<Prediction> {
    let class = q
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > q[best] { i } else { best });
    Ok(Prediction {
        continuous: expectation_transform(q)?,
        class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn normalize_label_examples() {
        assert_eq!(normalize_labels(1.0, 2).unwrap(), LabelPair { continuous: 0.0, categorical: 0 });
        assert_eq!(normalize_labels(5.0, 2).unwrap(), LabelPair { continuous: 1.0, categorical: 1 });
        assert_eq!(normalize_labels(5.0, 5).unwrap().categorical, 4);
        assert_eq!(normalize_labels(3.0, 2).unwrap(), LabelPair { continuous: 0.5, categorical: 1 });
        assert!(normalize_labels(0.9, 2).is_err());
        assert!(normalize_labels(5.1, 2).is_err());
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(expectation_transform(&[1.0, 0.0]).unwrap(), 0.25);
        assert_eq!(expectation_transform(&[0.0, 1.0]).unwrap(), 0.75);
        assert_eq!(expectation_transform(&[0.5, 0.5]).unwrap(), 0.5);
        assert!((expectation_transform(&[0.2; 5]).unwrap() - 0.5).abs() < 1e-7);
        assert!(expectation_transform(&[0.5, 0.6]).is_err());
        assert!(expectation_transform(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn continuous_loss_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(loss_continuous(z, &[0.5]).unwrap().item(), 0.0);
        assert_eq!(loss_continuous(z, &[1.0]).unwrap().item(), 0.25);
        let z2 = tape.constant(Tensor::zeros(&[2, 1]));
        assert_eq!(loss_continuous(z2, &[1.0, 0.0]).unwrap().item(), 0.25);
        assert!((loss_continuous(z2, &[1.0, 0.5]).unwrap().item() - 0.125).abs() < 1e-7);
    }

    #[test]
    fn combined_loss_hand_example() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2]));
        let labels = [LabelPair { continuous: 0.75, categorical: 1 }];
        let (_, b) = loss_combined(logits, &labels, &LossConfig::default()).unwrap();
        assert!((b.cross_entropy - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((b.mse - 0.0625).abs() < 1e-7);
        assert!((b.total - (std::f32::consts::LN_2 + 0.0625)).abs() < 1e-6);
    }

    #[test]
    fn combined_loss_vanishes_at_confident_midpoint() {
        let tape = Tape::new();
        // softmax of (−200, 200) is one-hot in f32
        let logits = tape.constant(Tensor::new(&[1, 2], vec![-200.0, 200.0]).unwrap());
        let labels = [LabelPair { continuous: 0.75, categorical: 1 }];
        let (loss, _) = loss_combined(logits, &labels, &LossConfig::default()).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn alpha_zero_is_mse_only() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let labels = [
            LabelPair { continuous: 0.1, categorical: 0 },
            LabelPair { continuous: 0.9, categorical: 1 },
        ];
        let cfg = LossConfig { alpha: 0.0, ..Default::default() };
        let (loss, b) = loss_combined(logits, &labels, &cfg).unwrap();
        assert_eq!(loss.item(), b.mse);
        assert!(b.cross_entropy > 0.0);
    }

    #[test]
    fn predict_examples() {
        let p = predict_from_probs(&[0.9, 0.1]).unwrap();
        assert_eq!(p.class, 0);
        assert!((p.continuous - 0.3).abs() < 1e-7);
        let p = predict_from_probs(&[0.5, 0.5]).unwrap();
        assert_eq!((p.class, p.continuous), (0, 0.5));
        let p = predict_from_probs(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!((p.class, p.continuous), (2, 1.0 - 1.0 / 6.0));
    }
}
