use crate::error::{ensure, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel statistics observed in a training-mode batch.
#[derive(Clone, Debug)]
pub struct ObservedStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, as used for running-variance updates.
    pub var_unbiased: Vec<f32>,
}

/// Per-channel normalization over every axis except axis 1.
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    stats: BnStats<'_>,
    eps: f32,
) -> Result<(Var<'t>, Option<ObservedStats>)> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    ensure!(shape.len() >= 2, "batch_norm: input needs a channel axis, got {shape:?}");
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    ensure!(
        gamma.shape() == [c] && beta.shape() == [c],
        "batch_norm: gamma/beta must have shape [{c}]"
    );
    let count = n * inner;
    let xd = xv.data();
    let channel_iter = |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * inner)..((b * c + ch) * inner + inner));

    let (mean, invstd, observed) = match stats {
        BnStats::Batch => {
            ensure!(
                count > 1,
                "batch_norm: training-mode batch has a single element per channel; variance undefined"
            );
            let mut mean = vec![0f64; c];
            let mut var = vec![0f64; c];
            for ch in 0..c {
                let m = channel_iter(ch).map(|i| xd[i] as f64).sum::<f64>() / count as f64;
                let v = channel_iter(ch).map(|i| (xd[i] as f64 - m).powi(2)).sum::<f64>() / count as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            let observed = ObservedStats {
                mean: mean.iter().map(|&m| m as f32).collect(),
                var_unbiased: var
                    .iter()
                    .map(|&v| (v * count as f64 / (count - 1) as f64) as f32)
                    .collect(),
            };
            let invstd = var.iter().map(|&v| 1.0 / (v + eps as f64).sqrt()).collect::<Vec<_>>();
            (mean, invstd, Some(observed))
        }
        BnStats::Running { mean, var } => {
            ensure!(
                mean.shape() == [c] && var.shape() == [c],
                "batch_norm: running statistics must have shape [{c}]"
            );
            let invstd = var.data().iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect();
            (mean.data().iter().map(|&m| m as f64).collect(), invstd, None)
        }
    };

    let (gv, bv) = (gamma.value(), beta.value());
    let mut out = vec![0f32; xd.len()];
    for ch in 0..c {
        let (g, b) = (gv.data()[ch] as f64, bv.data()[ch] as f64);
        for i in channel_iter(ch) {
            out[i] = (g * (xd[i] as f64 - mean[ch]) * invstd[ch] + b) as f32;
        }
    }
    let training = observed.is_some();
    let y = x.tape().record(
        "batch_norm",
        Tensor::from_parts(shape.clone(), out),
        &[x, gamma, beta],
        move |ctx| {
            let (x, gamma) = (&ctx.inputs[0], &ctx.inputs[1]);
            let (xd, gd) = (x.data(), ctx.grad.data());
            let channel_iter = |ch: usize| (0..n).flat_map(move |b| ((b * c + ch) * inner)..((b * c + ch) * inner + inner));
            let mut g_gamma = vec![0f32; c];
            let mut g_beta = vec![0f32; c];
            let mut gx = ctx.needs[0].then(|| vec![0f32; xd.len()]);
            for ch in 0..c {
                let xhat = |i: usize| (xd[i] as f64 - mean[ch]) * invstd[ch];
                let sum_g: f64 = channel_iter(ch).map(|i| gd[i] as f64).sum();
                let sum_gx: f64 = channel_iter(ch).map(|i| gd[i] as f64 * xhat(i)).sum();
                g_gamma[ch] = sum_gx as f32;
                g_beta[ch] = sum_g as f32;
                if let Some(gx) = gx.as_mut() {
                    let scale = gamma.data()[ch] as f64 * invstd[ch];
                    if training {
                        let m = count as f64;
                        for i in channel_iter(ch) {
                            gx[i] = (scale / m * (m * gd[i] as f64 - sum_g - xhat(i) * sum_gx)) as f32;
                        }
                    } else {
                        for i in channel_iter(ch) {
                            gx[i] = (scale * gd[i] as f64) as f32;
                        }
                    }
                }
            }
            vec![
                gx.map(|v| Tensor::from_parts(shape.clone(), v)),
                ctx.needs[1].then(|| Tensor::from_parts(vec![c], g_gamma)),
                ctx.needs[2].then(|| Tensor::from_parts(vec![c], g_beta)),
            ]
        },
    );
    Ok((y, observed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(t: &Tensor, ch: usize) -> (f64, f64) {
        let s = t.shape();
        let inner: usize = s[2..].iter().product();
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|b| {
                let start = (b * s[1] + ch) * inner;
                t.data()[start..start + inner].iter().map(|&v| v as f64).collect::<Vec<_>>()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[3, 2, 2, 3, 3], 4.0, &mut rng).map(|v| v + 7.0));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = batch_norm(x, g, b, BnStats::Batch, 1e-5).unwrap();
        assert!(stats.is_some());
        for ch in 0..2 {
            let (m, v) = channel_moments(&y.value(), ch);
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4, "ch {ch}: {m} {v}");
        }
        let g = tape.constant(Tensor::full(&[2], 2.0));
        let b = tape.constant(Tensor::full(&[2], 3.0));
        let (z, _) = batch_norm(y, g, b, BnStats::Batch, 1e-5).unwrap();
        for ch in 0..2 {
            let (m, v) = channel_moments(&z.value(), ch);
            assert!((m - 3.0).abs() < 1e-4 && (v.sqrt() - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_with_unit_stats_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = Tensor::randn(&[2, 3, 1, 2, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let (mean, var) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
        let (y, stats) = batch_norm(
            tape.constant(xv.clone()),
            tape.constant(Tensor::ones(&[3])),
            tape.constant(Tensor::zeros(&[3])),
            BnStats::Running { mean: &mean, var: &var },
            1e-5,
        )
        .unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(&xv) < 1e-4);
    }

    #[test]
    fn single_element_batch_is_rejected_in_training() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1, 1]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(batch_norm(x, g, b, BnStats::Batch, 1e-5).is_err());
    }
}
