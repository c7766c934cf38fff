use crate::error::{ensure, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    /// Sum of all elements as a `[1]` tensor (accumulated in `f64`).
    pub fn sum(self) -> Var<'t> {
        let total = self.value().sum_f64() as f32;
        self.tape().record("sum", Tensor::scalar(total), &[self], |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let n = v.numel();
        let m = (v.sum_f64() / n as f64) as f32;
        self.tape().record("mean", Tensor::scalar(m), &[self], move |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item() / n as f32))]
        })
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        ensure!(axis < shape.len(), "mean_axis: axis {axis} out of range for {shape:?}");
        ensure!(shape.len() > 1, "mean_axis: cannot remove the only axis of {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| xd[(o * len + l) * inner + i] as f64).sum();
                out[o * inner + i] = (s / len as f64) as f32;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.tape().record(
            "mean_axis",
            Tensor::from_parts(out_shape, out),
            &[self],
            move |ctx| {
                let g = ctx.grad.data();
                let scale = 1.0 / len as f32;
                let mut gx = vec![0f32; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), gx))]
            },
        ))
    }

    /// Softmax along `axis`, max-shifted, with `f64` denominators.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let out = softmax(&x, axis)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().record("softmax", out, &[self], move |ctx| {
            let (outer, len, inner) = axis_split(&shape, axis);
            let (g, y) = (ctx.grad.data(), ctx.output.data());
            let mut gx = vec![0f32; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[idx(l)] as f64 * y[idx(l)] as f64).sum();
                    for l in 0..len {
                        gx[idx(l)] = (y[idx(l)] as f64 * (g[idx(l)] as f64 - dot)) as f32;
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }))
    }
}

/// Value-level softmax shared by the op and by inference helpers.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    ensure!(axis < x.rank(), "softmax: axis {axis} out of range for {:?}", x.shape());
    ensure!(!x.has_nan(), "softmax: input contains NaN");
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0f32; xd.len()];
    let mut exps = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| xd[idx(l)]).fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0f64;
            for (l, e) in exps.iter_mut().enumerate() {
                *e = ((xd[idx(l)] - max) as f64).exp();
                denom += *e;
            }
            for (l, e) in exps.iter().enumerate() {
                out[idx(l)] = (e / denom) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::full(&[4], 1.7), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let t = Tensor::new(&[2], vec![0.0, 3f32.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[3, 5], 2.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for r in 0..3 {
            let total: f64 = (0..5).map(|c| s.get(&[r, c]) as f64).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap();
        assert!(softmax(&x, 0).is_err());
    }

    #[test]
    fn mean_axis_drops_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let m = x.mean_axis(1).unwrap();
        assert_eq!(m.value().data(), &[1.0, 4.0]);
        tape.backward(m.sum()).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| (g - 1.0 / 3.0).abs() < 1e-7));
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            steps in prop::collection::vec(-1280i32..1280, 12),
            shift in -50i32..50,
            axis in 0usize..2,
        ) {
            // Multiples of 1/64 keep the shifted inputs exact in f32.
            let vals = steps.iter().map(|&s| s as f32 / 64.0).collect();
            let x = Tensor::new(&[3, 4], vals).unwrap();
            let shifted = x.map(|v| v + shift as f32);
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&shifted, axis).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
            let (outer, len, inner) = axis_split(a.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|l| a.data()[(o * len + l) * inner + i] as f64).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
