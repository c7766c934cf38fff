//! Grad-CAM over a captured 3D feature map, guided backpropagation, and
//! PPM/PGM heatmap export.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{write_clip, Clip};
use crate::error::{ensure, Error, Result};
use crate::heads::HeadKind;
use crate::model::ModelGraph;
use crate::params::{ForwardCtx, Mode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use crate::model::DEFAULT_CAM_LAYER;

/// A nonnegative class activation map over a layer's `T'×H'×W'` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Tensor,
    pub layer: String,
    pub target_class: usize,
    /// `values` resampled to the clip's `T×H×W`, once computed.
    pub upsampled: Option<Tensor>,
}

/// `ReLU(Σ_c w_c·A_c)` with `w_c` the mean of the gradient over channel `c`.
/// Both inputs are `C×T×H×W`.
pub fn grad_cam_from(activation: &Tensor, gradient: &Tensor) -> Result<Tensor> {
    ensure!(
        activation.rank() == 4 && activation.shape() == gradient.shape(),
        "activation {:?} and gradient {:?} must be matching C×T×H×W tensors",
        activation.shape(),
        gradient.shape()
    );
    let s = activation.shape();
    let volume = s[1] * s[2] * s[3];
    let mut cam = vec![0f64; volume];
    for (a, g) in activation.data().chunks(volume).zip(gradient.data().chunks(volume)) {
        let w = g.iter().map(|&v| v as f64).sum::<f64>() / volume as f64;
        for (c, &v) in cam.iter_mut().zip(a) {
            *c += w * v as f64;
        }
    }
    Tensor::new(&s[1..], cam.into_iter().map(|v| v.max(0.0) as f32).collect())
}

/// Runs one clip through the model in evaluation mode and returns the target
/// logit with the forward record still alive on `tape`.
fn target_score<'t>(
    model: &ModelGraph,
    tape: &'t Tape,
    input: Var<'t>,
    target_class: usize,
    param_grads: bool,
) -> Result<(Var<'t>, crate::params::ForwardRecord<'t>)> {
    ensure!(
        model.config.head.head == HeadKind::Categorical,
        "class visualizations need the categorical head"
    );
    let k = model.config.head.k;
    ensure!(target_class < k, "target class {target_class} outside 0..{k}");
    let mut ctx = ForwardCtx::new(tape, &model.store, Mode::Eval);
    if !param_grads {
        ctx = ctx.without_param_grads();
    }
    let logits = model.forward(&ctx, input)?;
    let score = logits.reshape(&[k])?.narrow0(target_class, 1)?.sum();
    Ok((score, ctx.finish()))
}

fn clip_input(clip: &Tensor) -> Result<Tensor> {
    ensure!(
        clip.rank() == 4 && clip.shape()[1] == 3,
        "clip must be T×3×H×W, got {:?}",
        clip.shape()
    );
    let s = clip.shape();
    clip.permute(&[1, 0, 2, 3])?.reshape(&[1, 3, s[0], s[2], s[3]])
}

/// Grad-CAM of `target_class` at a captured layer such as `stage4.block2.conv2`.
pub fn grad_cam_3d(model: &ModelGraph, clip: &Tensor, target_class: usize, layer: &str) -> Result<ActivationMap> {
    let tape = Tape::new();
    let input = tape.constant(clip_input(clip)?);
    let (score, record) = target_score(model, &tape, input, target_class, true)?;
    let feature = record.capture(layer).ok_or_else(|| {
        let known: Vec<&str> = record.captures().iter().map(|(n, _)| n.as_str()).collect();
        Error::Contract(format!("unknown layer {layer:?}; capturable layers: {}", known.join(", ")))
    })?;
    tape.retain_grad(feature);
    tape.backward(score)?;
    let a = feature.value();
    let s = a.shape();
    let grad = tape.grad(feature).unwrap_or_else(|| Tensor::zeros(s));
    let shape = &s[1..];
    let values = grad_cam_from(&a.reshape(shape)?, &grad.reshape(shape)?)?;
    Ok(ActivationMap {
        values,
        layer: layer.to_string(),
        target_class,
        upsampled: None,
    })
}

/// Input saliency with the guided ReLU backward rule, shaped like the clip (`T×3×H×W`).
pub fn guided_backprop(model: &ModelGraph, clip: &Tensor, target_class: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let input = tape.leaf(clip_input(clip)?, true);
    let (score, _record) = target_score(model, &tape, input, target_class, false)?;
    tape.set_guided_relu(true);
    tape.backward(score)?;
    let g = input.grad().unwrap_or_else(|| Tensor::zeros(&input.shape()));
    let s = g.shape().to_vec();
    g.reshape(&s[1..])?.permute(&[1, 0, 2, 3])
}

/// Linear resampling of one axis with corner samples aligned.
fn resample_axis(src: &Tensor, axis: usize, len: usize) -> Result<Tensor> {
    let s = src.shape().to_vec();
    let from = s[axis];
    if from == len {
        return Ok(src.clone());
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.clone();
    out_shape[axis] = len;
    let mut out = vec![0f32; outer * len * inner];
    for i in 0..len {
        let pos = if len == 1 { 0.0 } else { i as f64 * (from - 1) as f64 / (len - 1) as f64 };
        let lo = (pos.floor() as usize).min(from - 1);
        let hi = (lo + 1).min(from - 1);
        let t = (pos - lo as f64) as f32;
        for o in 0..outer {
            let a = &src.data()[(o * from + lo) * inner..][..inner];
            let b = &src.data()[(o * from + hi) * inner..][..inner];
            let dst = &mut out[(o * len + i) * inner..][..inner];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = if t == 0.0 { x } else { x + t * (y - x) };
            }
        }
    }
    Tensor::new(&out_shape, out)
}

/// Separable trilinear upsampling of a `T'×H'×W'` map to `target`.
pub fn upsample_trilinear(map: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    ensure!(map.rank() == 3, "map must be T×H×W, got {:?}", map.shape());
    ensure!(
        map.shape().iter().zip(&target).all(|(&s, &t)| t >= s),
        "target {target:?} smaller than map {:?}",
        map.shape()
    );
    let mut out = map.clone();
    for (axis, &len) in target.iter().enumerate() {
        out = resample_axis(&out, axis, len)?;
    }
    Ok(out)
}

impl ActivationMap {
    /// Fills `upsampled` at the clip's resolution.
    pub fn upsample_to(&mut self, clip: &Tensor) -> Result<&Tensor> {
        let s = clip.shape();
        ensure!(s.len() == 4, "clip must be T×3×H×W, got {s:?}");
        let up = upsample_trilinear(&self.values, [s[0], s[2], s[3]])?;
        Ok(self.upsampled.insert(up))
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, header: &str, body: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(body))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes, per frame, an overlay `0.5·frame + 0.5·colour(map)` as PPM and the
/// normalized map as PGM. The map is divided by its clip-wide maximum; the
/// colour ramp runs from blue (0) to red (1).
pub fn export_heatmaps(map: &ActivationMap, clip: &Clip, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let s = clip.data.shape();
    let (t, h, w) = (s[0], s[2], s[3]);
    let up = map
        .upsampled
        .as_ref()
        .filter(|u| u.shape() == [t, h, w])
        .ok_or_else(|| Error::Contract("activation map must be upsampled to the clip resolution".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let max = up.data().iter().copied().fold(0f32, f32::max);
    let norm = |v: f32| if max > 0.0 { v / max } else { 0.0 };
    let plane = h * w;
    let mut files = Vec::with_capacity(2 * t);
    for f in 0..t {
        let frame = &clip.data.data()[f * 3 * plane..(f + 1) * 3 * plane];
        let m = &up.data()[f * plane..(f + 1) * plane];
        let mut rgb = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            let v = norm(m[i]);
            let colour = [v, 0.0, 1.0 - v];
            for c in 0..3 {
                rgb.push(to_byte(0.5 * frame[c * plane + i] + 0.5 * colour[c]));
            }
        }
        let stem = format!("{}_{}_f{f:02}", clip.video_id, clip.clip_index);
        let overlay = out_dir.join(format!("{stem}.ppm"));
        write_file(&overlay, &format!("P6\n{w} {h}\n255\n"), &rgb)?;
        let gray: Vec<u8> = m.iter().map(|&v| to_byte(norm(v))).collect();
        let raw = out_dir.join(format!("{stem}_raw.pgm"));
        write_file(&raw, &format!("P5\n{w} {h}\n255\n"), &gray)?;
        files.push(overlay);
        files.push(raw);
    }
    Ok(files)
}

/// Stores the upsampled, unnormalized map as a `T×1×H×W` clip-format file.
pub fn write_raw_map(map: &ActivationMap, path: &Path) -> Result<()> {
    let up = map
        .upsampled
        .as_ref()
        .ok_or_else(|| Error::Contract("activation map has not been upsampled".into()))?;
    let s = up.shape();
    write_clip(path, &up.reshape(&[s[0], 1, s[1], s[2]])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CLIP_LEN;

    #[test]
    fn single_channel_unit_weight_is_relu() {
        let a = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, -0.1]).unwrap();
        let g = Tensor::ones(&[1, 1, 2, 2]);
        let cam = grad_cam_from(&a, &g).unwrap();
        assert_eq!(cam.data(), &[1.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let a = Tensor::from_fn(&[3, 1, 2, 2], |i| i as f32 - 4.0);
        let cam = grad_cam_from(&a, &Tensor::zeros(&[3, 1, 2, 2])).unwrap();
        assert!(cam.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_examples() {
        let ramp = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let up = upsample_trilinear(&ramp, [1, 1, 4]).unwrap();
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in up.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        let m = Tensor::from_fn(&[2, 3, 2], |i| i as f32);
        assert_eq!(upsample_trilinear(&m, [2, 3, 2]).unwrap(), m);
        let c = Tensor::full(&[2, 2, 3], 0.7);
        let up = upsample_trilinear(&c, [5, 7, 9]).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.7));
        assert!(upsample_trilinear(&c, [1, 2, 3]).is_err());
    }

    #[test]
    fn export_writes_two_files_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = Clip::new(Tensor::full(&[CLIP_LEN, 3, 4, 5], 0.5), "v0001", 2).unwrap();
        let mut map = ActivationMap {
            values: Tensor::zeros(&[2, 2, 2]),
            layer: "x".into(),
            target_class: 1,
            upsampled: None,
        };
        assert!(export_heatmaps(&map, &clip, dir.path()).is_err());
        map.upsample_to(&clip.data).unwrap();
        let files = export_heatmaps(&map, &clip, dir.path()).unwrap();
        assert_eq!(files.len(), 64);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 64);
        let raw = fs::read(dir.path().join("v0001_2_f31_raw.pgm")).unwrap();
        assert!(raw.starts_with(b"P5\n5 4\n255\n"));
        assert!(raw[11..].iter().all(|&b| b == 0));
        let overlay = fs::read(dir.path().join("v0001_2_f00.ppm")).unwrap();
        // 0.5·0.5 + 0.5·(0, 0, 1) → (64, 64, 191).
        assert_eq!(&overlay[11..14], &[64, 64, 191]);
    }

    fn tiny_model() -> ModelGraph {
        let cfg = crate::model::ModelConfig { base_width: 2, ..Default::default() };
        crate::model::build_model(&cfg, 3).unwrap()
    }

    fn tiny_clip() -> Tensor {
        Tensor::from_fn(&[CLIP_LEN, 3, 112, 112], |i| ((i * 7919) % 101) as f32 / 100.0)
    }

    #[test]
    fn cam_matches_loop_oracle_and_zero_head_gives_zero_map() {
        let mut model = tiny_model();
        let clip = tiny_clip();
        let cam = grad_cam_3d(&model, &clip, 1, DEFAULT_CAM_LAYER).unwrap();
        assert_eq!(cam.values.shape(), &[2, 4, 4]);
        assert!(cam.values.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(grad_cam_3d(&model, &clip, 1, "stage9.block1.conv2").is_err());
        assert!(grad_cam_3d(&model, &clip, 5, DEFAULT_CAM_LAYER).is_err());

        // Same map recomputed with explicit loops from the raw capture and gradient.
        let tape = Tape::new();
        let input = tape.constant(clip_input(&clip).unwrap());
        let (score, record) = target_score(&model, &tape, input, 1, true).unwrap();
        let feature = record.capture(DEFAULT_CAM_LAYER).unwrap();
        tape.retain_grad(feature);
        tape.backward(score).unwrap();
        let (a, g) = (feature.value(), tape.grad(feature).unwrap());
        let s = a.shape().to_vec();
        let vol = s[2] * s[3] * s[4];
        for p in 0..vol {
            let mut acc = 0.0f64;
            for c in 0..s[1] {
                let w: f64 = (0..vol).map(|q| g.data()[c * vol + q] as f64).sum::<f64>() / vol as f64;
                acc += w * a.data()[c * vol + p] as f64;
            }
            assert!((cam.values.data()[p] as f64 - acc.max(0.0)).abs() < 1e-5);
        }

        let id = model.store.id("fc2.weight").unwrap();
        let shape = model.store.value(id).shape().to_vec();
        model.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        let zero = grad_cam_3d(&model, &clip, 0, DEFAULT_CAM_LAYER).unwrap();
        assert!(zero.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_backprop_is_clip_shaped_and_deterministic() {
        let model = tiny_model();
        let clip = tiny_clip();
        let a = guided_backprop(&model, &clip, 0).unwrap();
        assert_eq!(a.shape(), clip.shape());
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert!(a.data().iter().any(|&v| v != 0.0));
        assert_eq!(a, guided_backprop(&model, &clip, 0).unwrap());
    }

    #[test]
    fn reexport_is_byte_identical() {
        let model = tiny_model();
        let clip = Clip::new(tiny_clip(), "v0003", 0).unwrap();
        let mut map = grad_cam_3d(&model, &clip.data, 1, DEFAULT_CAM_LAYER).unwrap();
        map.upsample_to(&clip.data).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let f1 = export_heatmaps(&map, &clip, d1.path()).unwrap();
        let f2 = export_heatmaps(&map, &clip, d2.path()).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
        write_raw_map(&map, &d1.path().join("map.vfc")).unwrap();
        let back = crate::data::read_clip(&d1.path().join("map.vfc")).unwrap();
        assert_eq!(back.shape(), &[CLIP_LEN, 1, 112, 112]);
    }
}
