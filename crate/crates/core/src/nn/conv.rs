//! 3D cross-correlation via chunked im2col + GEMM.

use crate::error::{ensure, Result};
use crate::ops::gemm::{gemm, MatRef};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Target size of one im2col chunk, in floats.
const CHUNK_FLOATS: usize = 1 << 17;
/// Widest output channel count handled by direct convolution.
const DIRECT_MAX_CHANNELS: usize = 4;

/// Spatial-temporal geometry of a 3D convolution or pooling window, ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Geometry3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<Self> {
        ensure!(kernel.iter().all(|&k| k >= 1), "kernel extents must be >= 1, got {kernel:?}");
        ensure!(stride.iter().all(|&s| s >= 1), "strides must be >= 1, got {stride:?}");
        Ok(Self { kernel, stride, padding })
    }

    /// `floor((in + 2·pad − kernel)/stride) + 1` per axis.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            ensure!(
                padded >= self.kernel[a],
                "window {:?} does not fit input {input:?} with padding {:?}",
                self.kernel,
                self.padding
            );
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Shapes shared by the forward and backward passes.
#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: Geometry3d,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.c_in * self.geom.kernel.iter().product::<usize>()
    }
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }
    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }
    /// Narrow layers skip im2col: the GEMM would be bound by column traffic.
    fn use_direct(&self) -> bool {
        self.c_out <= DIRECT_MAX_CHANNELS && !self.geom.is_pointwise()
    }
    /// Number of `(t, h)` output rows.
    fn rows(&self) -> usize {
        self.output[0] * self.output[1]
    }
    /// Output rows per GEMM chunk, sized so the column buffer stays cache resident.
    fn chunk_rows(&self) -> usize {
        (CHUNK_FLOATS / (self.k() * self.output[2])).clamp(1, self.rows())
    }
}

/// Output positions `o` in `[0, out_len)` whose source `o·stride + offset − pad`
/// lies inside `[0, in_len)`.
fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, in_len: usize) -> (usize, usize) {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let limit = in_len + pad; // need o·stride + offset < limit
    let hi = if limit > offset { (limit - offset).div_ceil(stride).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `cols` (K × rc·Wo) for output rows `[r0, r0+rc)` of one sample, where
/// row `r` is the `(t, h)` pair `(r / Ho, r % Ho)`. `xp` is the phase-split input.
fn im2col(xp: &[f32], d: &ConvDims, taps: &[Tap], r0: usize, rc: usize, cols: &mut [f32]) {
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, _] = d.geom.padding;
    let [ti_len, hi_len, wi_len] = d.input;
    let [_, ho_len, wo_len] = d.output;
    let row_len = sw * wi_len.div_ceil(sw);
    let width = rc * wo_len;
    let mut row = 0;
    for ci in 0..d.c_in {
        for dt in 0..kt {
            for dh in 0..kh {
                for tap in &taps[..kw] {
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for (r, out) in (r0..r0 + rc).zip(dst.chunks_exact_mut(wo_len)) {
                        let (to, ho) = (r / ho_len, r % ho_len);
                        let ti = (to * st + dt).checked_sub(pt).filter(|&t| t < ti_len);
                        let hi = (ho * sh + dh).checked_sub(ph).filter(|&h| h < hi_len);
                        let (Some(ti), Some(hi)) = (ti, hi) else {
                            out.fill(0.0);
                            continue;
                        };
                        let base = ((ci * ti_len + ti) * hi_len + hi) * row_len + tap.start;
                        out[..tap.lo].fill(0.0);
                        out[tap.hi..].fill(0.0);
                        out[tap.lo..tap.hi].copy_from_slice(&xp[base..base + (tap.hi - tap.lo)]);
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input gradient of one sample.
fn col2im(cols: &[f32], d: &ConvDims, r0: usize, rc: usize, gx: &mut [f32]) {
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.padding;
    let [ti_len, hi_len, wi_len] = d.input;
    let [_, ho_len, wo_len] = d.output;
    let width = rc * wo_len;
    let in_volume = d.in_volume();
    let mut row = 0;
    for ci in 0..d.c_in {
        let gc = &mut gx[ci * in_volume..(ci + 1) * in_volume];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(wo_len, sw, dw, pw, wi_len);
                    let src = &cols[row * width..(row + 1) * width];
                    for (r, s_row) in (r0..r0 + rc).zip(src.chunks_exact(wo_len)) {
                        let (to, ho) = (r / ho_len, r % ho_len);
                        let ti = (to * st + dt).checked_sub(pt).filter(|&t| t < ti_len);
                        let hi = (ho * sh + dh).checked_sub(ph).filter(|&h| h < hi_len);
                        let (Some(ti), Some(hi)) = (ti, hi) else { continue };
                        let g_row = &mut gc[(ti * hi_len + hi) * wi_len..];
                        for wo in w_lo..w_hi {
                            g_row[wo * sw + dw - pw] += s_row[wo];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Length of one sample's input after splitting each W row into `stride_w` phases.
fn phased_len(d: &ConvDims) -> usize {
    let sw = d.geom.stride[2];
    d.c_in * d.input[0] * d.input[1] * sw * d.input[2].div_ceil(sw)
}

/// Reorders each W row so that `x[j·sw + phase]` lands at `[phase][j]`, turning
/// strided reads into contiguous ones.
fn phase_split(xn: &[f32], d: &ConvDims) -> Vec<f32> {
    let sw = d.geom.stride[2];
    let wi = d.input[2];
    if sw == 1 {
        return xn.to_vec();
    }
    let wp = wi.div_ceil(sw);
    let mut out = vec![0f32; phased_len(d)];
    for (src, dst) in xn.chunks_exact(wi).zip(out.chunks_exact_mut(sw * wp)) {
        for (i, &v) in src.iter().enumerate() {
            dst[(i % sw) * wp + i / sw] = v;
        }
    }
    out
}

/// Adds a phase-split gradient back into natural layout.
fn phase_merge(gxp: &[f32], d: &ConvDims, gx: &mut [f32]) {
    let sw = d.geom.stride[2];
    let wi = d.input[2];
    let wp = wi.div_ceil(sw);
    for (src, dst) in gxp.chunks_exact(sw * wp).zip(gx.chunks_exact_mut(wi)) {
        for (i, v) in dst.iter_mut().enumerate() {
            *v += src[(i % sw) * wp + i / sw];
        }
    }
}

/// Per-`dw` tap: valid output columns and where they read in the phased row.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    /// Offset of output column `lo` within the phased input row.
    start: usize,
}

fn taps(d: &ConvDims) -> Vec<Tap> {
    let (sw, pw, kw) = (d.geom.stride[2], d.geom.padding[2], d.geom.kernel[2]);
    let wp = d.input[2].div_ceil(sw);
    (0..kw)
        .map(|dw| {
            let (lo, hi) = valid_range(d.output[2], sw, dw, pw, d.input[2]);
            let first = lo * sw + dw - pw;
            let start = if lo < hi { (first % sw) * wp + first / sw } else { 0 };
            Tap { lo, hi, start }
        })
        .collect()
}

/// Visits every `(output row, ci, dt, dh)` whose source row exists, passing the
/// output row index and the offset of the phased input row.
fn for_each_source_row(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let [kt, kh, _] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, _] = d.geom.padding;
    let [ti_len, hi_len, wi_len] = d.input;
    let row_len = sw * wi_len.div_ceil(sw);
    for r in 0..d.rows() {
        let (to, ho) = (r / d.output[1], r % d.output[1]);
        for ci in 0..d.c_in {
            for dt in 0..kt {
                let Some(ti) = (to * st + dt).checked_sub(pt).filter(|&t| t < ti_len) else { continue };
                for dh in 0..kh {
                    let Some(hi) = (ho * sh + dh).checked_sub(ph).filter(|&h| h < hi_len) else { continue };
                    let base = ((ci * ti_len + ti) * hi_len + hi) * row_len;
                    f(r, base, (ci * kt + dt) * kh + dh);
                }
            }
        }
    }
}

fn direct_forward(xp: &[f32], w: &[f32], d: &ConvDims, on: &mut [f32]) {
    let (wo_len, kw, p) = (d.output[2], d.geom.kernel[2], d.out_volume());
    let w_stride = d.k();
    let taps = taps(d);
    let mut acc = vec![0f32; d.c_out * wo_len];
    let mut current = usize::MAX;
    let flush = |r: usize, acc: &mut [f32], on: &mut [f32]| {
        for (co, row) in acc.chunks_exact_mut(wo_len).enumerate() {
            on[co * p + r * wo_len..][..wo_len].copy_from_slice(row);
            row.fill(0.0);
        }
    };
    for_each_source_row(d, |r, base, kidx| {
        if r != current {
            if current != usize::MAX {
                flush(current, &mut acc, on);
            }
            current = r;
        }
        for (dw, tap) in taps.iter().enumerate() {
            let n = tap.hi - tap.lo;
            let src = &xp[base + tap.start..][..n];
            for (co, row) in acc.chunks_exact_mut(wo_len).enumerate() {
                let wv = w[co * w_stride + kidx * kw + dw];
                for (a, &x) in row[tap.lo..tap.hi].iter_mut().zip(src) {
                    *a += wv * x;
                }
            }
        }
    });
    if current != usize::MAX {
        flush(current, &mut acc, on);
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn direct_backward(
    gn: &[f32],
    xp: Option<&[f32]>,
    w: &[f32],
    d: &ConvDims,
    mut gw: Option<&mut [f32]>,
    mut gxp: Option<&mut [f32]>,
) {
    let (wo_len, kw, p) = (d.output[2], d.geom.kernel[2], d.out_volume());
    let w_stride = d.k();
    let taps = taps(d);
    for_each_source_row(d, |r, base, kidx| {
        for (dw, tap) in taps.iter().enumerate() {
            let n = tap.hi - tap.lo;
            for co in 0..d.c_out {
                let g_row = &gn[co * p + r * wo_len..][tap.lo..tap.hi];
                let wi = co * w_stride + kidx * kw + dw;
                if let (Some(gw), Some(xp)) = (gw.as_deref_mut(), xp) {
                    let src = &xp[base + tap.start..][..n];
                    gw[wi] += dot(g_row, src);
                }
                if let Some(gxp) = gxp.as_deref_mut() {
                    let wv = w[wi];
                    for (dst, &g) in gxp[base + tap.start..][..n].iter_mut().zip(g_row) {
                        *dst += wv * g;
                    }
                }
            }
        }
    });
}

/// 3D cross-correlation of `x: N×C_in×T×H×W` with `weight: C_out×C_in×kt×kh×kw`.
pub fn conv3d<'t>(
    x: Var<'t>,
    weight: Var<'t>,
    bias: Option<Var<'t>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), weight.value());
    ensure!(xv.rank() == 5, "conv3d: input must be N×C×T×H×W, got {:?}", xv.shape());
    ensure!(wv.rank() == 5, "conv3d: weight must be 5D, got {:?}", wv.shape());
    let xs = xv.shape();
    let ws = wv.shape();
    ensure!(
        xs[1] == ws[1],
        "conv3d: input has {} channels but weight expects {}",
        xs[1],
        ws[1]
    );
    let geom = Geometry3d::new([ws[2], ws[3], ws[4]], stride, padding)?;
    let output = geom.output_extents([xs[2], xs[3], xs[4]])?;
    let d = ConvDims {
        n: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        input: [xs[2], xs[3], xs[4]],
        output,
        geom,
    };
    if let Some(b) = &bias {
        ensure!(
            b.shape() == [d.c_out],
            "conv3d: bias shape {:?} does not match {} output channels",
            b.shape(),
            d.c_out
        );
    }
    let mut out = vec![0f32; d.n * d.c_out * d.out_volume()];
    conv_forward(xv.data(), wv.data(), &d, &mut out);
    if let Some(b) = &bias {
        let bv = b.value();
        for (i, plane) in out.chunks_mut(d.out_volume()).enumerate() {
            let b = bv.data()[i % d.c_out];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    let out_shape = vec![d.n, d.c_out, output[0], output[1], output[2]];
    let mut parents = vec![x, weight];
    parents.extend(bias);
    Ok(x.tape().record(
        "conv3d",
        Tensor::from_parts(out_shape, out),
        &parents,
        move |ctx| conv_backward(ctx.grad.data(), &ctx.inputs[0], &ctx.inputs[1], &d, ctx.needs),
    ))
}

fn conv_forward(x: &[f32], w: &[f32], d: &ConvDims, out: &mut [f32]) {
    let k = d.k();
    let p = d.out_volume();
    let wm = MatRef::row_major(w, d.c_out, k);
    for n in 0..d.n {
        let xn = &x[n * d.c_in * d.in_volume()..(n + 1) * d.c_in * d.in_volume()];
        let on = &mut out[n * d.c_out * p..(n + 1) * d.c_out * p];
        if d.geom.is_pointwise() {
            gemm(1.0, wm, MatRef::row_major(xn, k, p), 0.0, on, p);
            continue;
        }
        if d.use_direct() {
            direct_forward(&phase_split(xn, d), w, d, on);
            continue;
        }
        let rc_max = d.chunk_rows();
        let wo = d.output[2];
        let xp = phase_split(xn, d);
        let taps = taps(d);
        let mut cols = vec![0f32; k * rc_max * wo];
        let mut r0 = 0;
        while r0 < d.rows() {
            let rc = rc_max.min(d.rows() - r0);
            let width = rc * wo;
            im2col(&xp, d, &taps, r0, rc, &mut cols);
            gemm(
                1.0,
                wm,
                MatRef::row_major(&cols[..k * width], k, width),
                0.0,
                &mut on[r0 * wo..],
                p,
            );
            r0 += rc;
        }
    }
}

fn conv_backward(g: &[f32], x: &Tensor, w: &Tensor, d: &ConvDims, needs: &[bool]) -> Vec<Option<Tensor>> {
    let k = d.k();
    let p = d.out_volume();
    let (need_x, need_w) = (needs[0], needs[1]);
    let need_b = needs.get(2).copied().unwrap_or(false);
    let mut gx = need_x.then(|| vec![0f32; x.numel()]);
    let mut gw = need_w.then(|| vec![0f32; w.numel()]);
    let wm = MatRef::row_major(w.data(), d.c_out, k);
    let x_stride = d.c_in * d.in_volume();

    if (need_x || need_w) && d.use_direct() {
        for n in 0..d.n {
            let xn = &x.data()[n * x_stride..(n + 1) * x_stride];
            let gn = &g[n * d.c_out * p..(n + 1) * d.c_out * p];
            let xp = need_w.then(|| phase_split(xn, d));
            let mut gxp = need_x.then(|| vec![0f32; phased_len(d)]);
            direct_backward(gn, xp.as_deref(), w.data(), d, gw.as_deref_mut(), gxp.as_deref_mut());
            if let (Some(gx), Some(gxp)) = (gx.as_mut(), gxp) {
                phase_merge(&gxp, d, &mut gx[n * x_stride..(n + 1) * x_stride]);
            }
        }
    } else if need_x || need_w {
        let wo = d.output[2];
        let (rc_max, scratch) = if d.geom.is_pointwise() {
            (d.rows(), 0)
        } else {
            (d.chunk_rows(), k * d.chunk_rows() * wo)
        };
        let taps = taps(d);
        let mut cols = vec![0f32; scratch];
        let mut gcols = vec![0f32; scratch];
        for n in 0..d.n {
            let xn = &x.data()[n * x_stride..(n + 1) * x_stride];
            let gn = &g[n * d.c_out * p..(n + 1) * d.c_out * p];
            let xp = (need_w && !d.geom.is_pointwise()).then(|| phase_split(xn, d));
            let mut r0 = 0;
            while r0 < d.rows() {
                let rc = rc_max.min(d.rows() - r0);
                let width = rc * wo;
                let g_chunk = MatRef {
                    data: &gn[r0 * wo..],
                    rows: d.c_out,
                    cols: width,
                    row_stride: p,
                    col_stride: 1,
                };
                if let Some(gw) = gw.as_mut() {
                    let cols_ref = if d.geom.is_pointwise() {
                        MatRef::row_major(xn, k, p)
                    } else {
                        im2col(xp.as_deref().expect("phased input"), d, &taps, r0, rc, &mut cols);
                        MatRef::row_major(&cols[..k * width], k, width)
                    };
                    gemm(1.0, g_chunk, cols_ref.t(), 1.0, gw, k);
                }
                if let Some(gx) = gx.as_mut() {
                    let gxn = &mut gx[n * x_stride..(n + 1) * x_stride];
                    if d.geom.is_pointwise() {
                        gemm(1.0, wm.t(), g_chunk, 1.0, gxn, p);
                    } else {
                        gemm(1.0, wm.t(), g_chunk, 0.0, &mut gcols[..k * width], width);
                        col2im(&gcols[..k * width], d, r0, rc, gxn);
                    }
                }
                r0 += rc;
            }
        }
    }
    let gb = need_b.then(|| {
        let mut gb = vec![0f64; d.c_out];
        for (i, plane) in g.chunks(p).enumerate() {
            gb[i % d.c_out] += plane.iter().map(|&v| v as f64).sum::<f64>();
        }
        Tensor::from_parts(vec![d.c_out], gb.into_iter().map(|v| v as f32).collect())
    });
    let mut grads = vec![
        gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        gw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
    ];
    if needs.len() == 3 {
        grads.push(gb);
    }
    grads
}
