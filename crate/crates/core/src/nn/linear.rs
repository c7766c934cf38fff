use crate::error::{ensure, Result};
use crate::ops::gemm::{gemm, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Affine map `x·W + b` for `x: N×D`, `W: D×D'`, `b: D'`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    ensure!(
        xv.rank() == 2 && wv.rank() == 2 && xv.shape()[1] == wv.shape()[0],
        "linear: input {:?} incompatible with weight {:?}",
        xv.shape(),
        wv.shape()
    );
    let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
    ensure!(bv.shape() == [d_out], "linear: bias {:?} must have shape [{d_out}]", bv.shape());
    let mut out = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        out.extend_from_slice(bv.data());
    }
    gemm(1.0, MatRef::row_major(xv.data(), n, d_in), MatRef::row_major(wv.data(), d_in, d_out), 1.0, &mut out, d_out);
    Ok(x.tape().record(
        "linear",
        Tensor::from_parts(vec![n, d_out], out),
        &[x, weight, bias],
        move |ctx| {
            let g = MatRef::row_major(ctx.grad.data(), n, d_out);
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![0f32; n * d_in];
                gemm(1.0, g, MatRef::row_major(ctx.inputs[1].data(), d_in, d_out).t(), 0.0, &mut gx, d_in);
                Tensor::from_parts(vec![n, d_in], gx)
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![0f32; d_in * d_out];
                gemm(1.0, MatRef::row_major(ctx.inputs[0].data(), n, d_in).t(), g, 0.0, &mut gw, d_out);
                Tensor::from_parts(vec![d_in, d_out], gw)
            });
            let gb = ctx.needs[2].then(|| {
                let gd = ctx.grad.data();
                let sums = (0..d_out)
                    .map(|j| (0..n).map(|i| gd[i * d_out + j] as f64).sum::<f64>() as f32)
                    .collect();
                Tensor::from_parts(vec![d_out], sums)
            });
            vec![gx, gw, gb]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_bias_only() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let y = linear(tape.constant(xv.clone()), tape.constant(eye), tape.constant(Tensor::zeros(&[4]))).unwrap();
        assert_eq!(*y.value(), xv);
        let b = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let y = linear(tape.constant(xv), tape.constant(Tensor::zeros(&[4, 2])), tape.constant(b)).unwrap();
        assert_eq!(y.value().data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn matches_matmul_plus_bias() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = tape.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let w = tape.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let bv = Tensor::randn(&[2], 1.0, &mut rng);
        let y = linear(x, w, tape.constant(bv.clone())).unwrap();
        let rows = Tensor::from_fn(&[5, 2], |i| bv.data()[i % 2]);
        let expected = x.matmul(w).unwrap().add(tape.constant(rows)).unwrap();
        assert_eq!(*y.value(), *expected.value());
    }

    #[test]
    fn rejects_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(linear(x, w, tape.constant(Tensor::zeros(&[2]))).is_err());
    }
}
