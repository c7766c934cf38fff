use crate::error::{ensure, Result};
use crate::ops::gemm::{gemm, gemm_wide, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// `[M×K]·[K×N] → [M×N]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        ensure!(self.same_tape(&rhs), "matmul: operands live on different tapes");
        let (a, b) = (self.value(), rhs.value());
        ensure!(
            a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0f32; m * n];
        gemm(1.0, MatRef::row_major(a.data(), m, k), MatRef::row_major(b.data(), k, n), 0.0, &mut out, n);
        Ok(self.tape().record(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[self, rhs],
            move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let g = MatRef::row_major(ctx.grad.data(), m, n);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0f32; m * k];
                    gemm(1.0, g, MatRef::row_major(b.data(), k, n).t(), 0.0, &mut ga, k);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0f32; k * n];
                    gemm(1.0, MatRef::row_major(a.data(), m, k).t(), g, 0.0, &mut gb, n);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            },
        ))
    }

    /// Batched product `[B×M×K]·[B×K×N] → [B×M×N]`, accumulated in f64.
    pub fn bmm(self, rhs: Var<'t>) -> Result<Var<'t>> {
        ensure!(self.same_tape(&rhs), "bmm: operands live on different tapes");
        let (a, b) = (self.value(), rhs.value());
        ensure!(
            a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0] && a.shape()[2] == b.shape()[1],
            "bmm: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0f32; bs * m * n];
        for i in 0..bs {
            gemm_wide(
                MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
            );
        }
        Ok(self.tape().record(
            "bmm",
            Tensor::from_parts(vec![bs, m, n], out),
            &[self, rhs],
            move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let gd = ctx.grad.data();
                let ga = ctx.needs[0].then(|| {
                    let mut ga = vec![0f32; bs * m * k];
                    for i in 0..bs {
                        gemm_wide(
                            MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k,
                        );
                    }
                    Tensor::from_parts(vec![bs, m, k], ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0f32; bs * k * n];
                    for i in 0..bs {
                        gemm_wide(
                            MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(&gd[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            n,
                        );
                    }
                    Tensor::from_parts(vec![bs, k, n], gb)
                });
                vec![ga, gb]
            },
        ))
    }
}
