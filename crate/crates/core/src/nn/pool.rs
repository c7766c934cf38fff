use crate::error::{ensure, Result};
use crate::nn::conv::Geometry3d;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Windowed maximum over (T, H, W). Padded positions never win.
///
/// Backward routes each output gradient to the first maximal element of its
/// window in row-major window order.
pub fn maxpool3d<'t>(x: Var<'t>, kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Var<'t>> {
    let xv = x.value();
    ensure!(xv.rank() == 5, "maxpool3d: input must be N×C×T×H×W, got {:?}", xv.shape());
    ensure!(
        (0..3).all(|a| padding[a] < kernel[a]),
        "maxpool3d: padding {padding:?} must be smaller than kernel {kernel:?}"
    );
    let geom = Geometry3d::new(kernel, stride, padding)?;
    let s = xv.shape();
    let (planes, input) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let output = geom.output_extents(input)?;
    let in_vol: usize = input.iter().product();
    let out_vol: usize = output.iter().product();
    let xd = xv.data();
    let mut out = vec![0f32; planes * out_vol];
    let mut argmax = vec![0usize; planes * out_vol];
    for plane in 0..planes {
        let base = plane * in_vol;
        for to in 0..output[0] {
            for ho in 0..output[1] {
                for wo in 0..output[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dt in 0..kernel[0] {
                        let Some(ti) = source(to, stride[0], dt, padding[0], input[0]) else { continue };
                        for dh in 0..kernel[1] {
                            let Some(hi) = source(ho, stride[1], dh, padding[1], input[1]) else { continue };
                            for dw in 0..kernel[2] {
                                let Some(wi) = source(wo, stride[2], dw, padding[2], input[2]) else { continue };
                                let idx = base + (ti * input[1] + hi) * input[2] + wi;
                                if best_idx == usize::MAX || xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = plane * out_vol + (to * output[1] + ho) * output[2] + wo;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    let out_shape = vec![s[0], s[1], output[0], output[1], output[2]];
    Ok(x.tape().record(
        "maxpool3d",
        Tensor::from_parts(out_shape, out),
        &[x],
        move |ctx| {
            let mut gx = Tensor::zeros(ctx.inputs[0].shape());
            let gd = gx.data_mut();
            for (&src, &g) in argmax.iter().zip(ctx.grad.data()) {
                gd[src] += g;
            }
            vec![Some(gx)]
        },
    ))
}

fn source(o: usize, stride: usize, offset: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + offset).checked_sub(pad).filter(|&i| i < len)
}
