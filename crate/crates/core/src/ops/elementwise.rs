use crate::error::{ensure, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

fn check_same<'t>(op: &str, a: &Var<'t>, b: &Var<'t>) -> Result<()> {
    ensure!(a.same_tape(b), "{op}: operands live on different tapes");
    let (sa, sb) = (a.shape(), b.shape());
    ensure!(sa == sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    Ok(())
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        check_same("add", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.tape().record("add", out, &[self, other], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        check_same("sub", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.tape().record("sub", out, &[self, other], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        check_same("mul", &self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.tape().record("mul", out, &[self, other], |ctx| {
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(b, |g, b| g * b)),
                ctx.needs[1].then(|| ctx.grad.zip_map(a, |g, a| g * a)),
            ]
        }))
    }

    /// Multiplies by a constant.
    pub fn scale(self, factor: f32) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.tape().record("scale", out, &[self], move |ctx| {
            vec![Some(ctx.grad.map(|g| g * factor))]
        })
    }

    /// Adds a constant to every element.
    pub fn add_scalar(self, c: f32) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape()
            .record("add_scalar", out, &[self], |ctx| vec![Some(ctx.grad.clone())])
    }

    /// Multiplies every element by a single-element variable (differentiable in both).
    pub fn mul_scalar_var(self, s: Var<'t>) -> Result<Var<'t>> {
        ensure!(self.same_tape(&s), "mul_scalar_var: operands live on different tapes");
        let sv = s.value();
        ensure!(sv.numel() == 1, "mul_scalar_var: scalar operand has shape {:?}", sv.shape());
        let factor = sv.item();
        let out = self.value().map(|v| v * factor);
        Ok(self.tape().record("mul_scalar_var", out, &[self, s], |ctx| {
            let factor = ctx.inputs[1].item();
            let gs = ctx.needs[1].then(|| {
                let dot: f64 = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| g as f64 * x as f64)
                    .sum();
                Tensor::from_parts(ctx.inputs[1].shape().to_vec(), vec![dot as f32])
            });
            vec![ctx.needs[0].then(|| ctx.grad.map(|g| g * factor)), gs]
        }))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape().record("relu", out, &[self], |ctx| {
            let x = &ctx.inputs[0];
            let g = if ctx.guided {
                ctx.grad
                    .zip_map(x, |g, x| if x > 0.0 && g > 0.0 { g } else { 0.0 })
            } else {
                ctx.grad.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })
            };
            vec![Some(g)]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.tape().record("sigmoid", out, &[self], |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.output, |g, y| g * y * (1.0 - y)))]
        })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(self, floor: f32) -> Var<'t> {
        let out = self.value().map(|v| v.max(floor).ln());
        self.tape().record("log_clamped", out, &[self], move |ctx| {
            vec![Some(ctx.grad.zip_map(&ctx.inputs[0], |g, x| {
                if x > floor {
                    g / x
                } else {
                    0.0
                }
            }))]
        })
    }

    pub fn square(self) -> Var<'t> {
        let out = self.value().map(|v| v * v);
        self.tape().record("square", out, &[self], |ctx| {
            vec![Some(ctx.grad.zip_map(&ctx.inputs[0], |g, x| 2.0 * g * x))]
        })
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_sigmoid_add() {
        let tape = Tape::new();
        let x = tape.constant(t(&[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.constant(t(&[0.0])).sigmoid().item(), 0.5);
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1.0, 2.0]));
        let b = tape.constant(t(&[1.0, 2.0, 3.0]));
        assert!(a.add(b).is_err());
        assert!(a.mul(b).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 2.0]), true);
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let loss = x.sum().add(x.sum()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::full(&[2, 3], 2.0));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, -1.0]), true);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn guided_relu_gates_negative_upstream() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1.0, 1.0, -1.0]), true);
        let w = tape.constant(t(&[2.0, -3.0, 5.0]));
        let loss = x.relu().mul(w).unwrap().sum();
        tape.set_guided_relu(true);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 0.0, 0.0]);
    }
}
