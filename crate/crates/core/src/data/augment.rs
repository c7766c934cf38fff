//! Clip-level augmentation: six transforms whose parameters are drawn once per
//! clip and reused for every frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::clip::Clip;

const FIRE_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AugmentStrategy {
    None,
    /// One of flip, brightness up, brightness down, drawn once per batch.
    Less,
    /// All six transforms, each applied independently with probability 0.5.
    #[default]
    More,
}

impl std::str::FromStr for AugmentStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "less" => Ok(Self::Less),
            "more" => Ok(Self::More),
            other => Err(format!("unknown augmentation strategy {other:?} (expected none|less|more)")),
        }
    }
}

impl std::fmt::Display for AugmentStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Less => "less",
            Self::More => "more",
        })
    }
}

/// Chosen transforms and magnitudes; `None` means the transform did not fire.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub brighten: Option<f32>,
    pub darken: Option<f32>,
    pub blur_sigma: Option<f32>,
    pub saturation: Option<f32>,
    pub contrast: Option<f32>,
}

impl AugmentParams {
    /// Every transform fires independently with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut fire = |lo: f32, hi: f32| rng.random_bool(FIRE_PROBABILITY).then(|| rng.random_range(lo..=hi));
        let flip = fire(0.0, 1.0).is_some();
        Self {
            flip,
            brighten: fire(0.05, 0.2),
            darken: fire(0.05, 0.2),
            blur_sigma: fire(0.3, 1.0),
            saturation: fire(0.7, 1.3),
            contrast: fire(0.7, 1.3),
        }
    }

    /// Exactly one of flip, brightness up, brightness down.
    pub fn sample_less<R: Rng + ?Sized>(rng: &mut R) -> Self {
        match rng.random_range(0..3) {
            0 => Self {
                flip: true,
                ..Self::default()
            },
            1 => Self {
                brighten: Some(rng.random_range(0.05..=0.2)),
                ..Self::default()
            },
            _ => Self {
                darken: Some(rng.random_range(0.05..=0.2)),
                ..Self::default()
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the transforms in a fixed order to one `3×H×W` frame, clamping to `[0, 1]`.
    pub fn apply_frame(&self, frame: &mut [f32], h: usize, w: usize) {
        let plane = h * w;
        debug_assert_eq!(frame.len(), 3 * plane);
        if self.flip {
            for row in frame.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if let Some(d) = self.brighten {
            frame.iter_mut().for_each(|v| *v = (*v + d).min(1.0));
        }
        if let Some(d) = self.darken {
            frame.iter_mut().for_each(|v| *v = (*v - d).max(0.0));
        }
        if let Some(sigma) = self.blur_sigma {
            for channel in frame.chunks_exact_mut(plane) {
                gaussian_blur3(channel, h, w, sigma);
            }
        }
        if let Some(s) = self.saturation {
            let (r, rest) = frame.split_at_mut(plane);
            let (g, b) = rest.split_at_mut(plane);
            for i in 0..plane {
                let luma = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
                for c in [&mut r[i], &mut g[i], &mut b[i]] {
                    *c = (luma + s * (*c - luma)).clamp(0.0, 1.0);
                }
            }
        }
        if let Some(c) = self.contrast {
            let mean = (frame.iter().map(|&v| v as f64).sum::<f64>() / frame.len() as f64) as f32;
            frame
                .iter_mut()
                .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
        }
    }

    /// Applies to every frame of a `T×3×H×W` tensor.
    pub fn apply(&self, data: &Tensor) -> Tensor {
        self.apply_traced(data, &mut Vec::new())
    }

    /// Like [`apply`](Self::apply), recording the parameters used for each frame.
    pub fn apply_traced(&self, data: &Tensor, trace: &mut Vec<AugmentParams>) -> Tensor {
        let s = data.shape();
        let (h, w) = (s[2], s[3]);
        let mut out = data.clone();
        if self.is_identity() {
            trace.extend(std::iter::repeat_n(*self, s[0]));
            return out;
        }
        for frame in out.data_mut().chunks_exact_mut(3 * h * w) {
            trace.push(*self);
            self.apply_frame(frame, h, w);
        }
        out
    }
}

/// Separable 3×3 Gaussian with edge replication.
fn gaussian_blur3(channel: &mut [f32], h: usize, w: usize, sigma: f32) {
    let side = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let (k0, k1) = (side / norm, 1.0 / norm);
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &channel[y * w..(y + 1) * w];
        for x in 0..w {
            let l = row[x.saturating_sub(1)];
            let r = row[(x + 1).min(w - 1)];
            tmp[y * w + x] = k0 * l + k1 * row[x] + k0 * r;
        }
    }
    for y in 0..h {
        let (up, down) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            channel[y * w + x] = k0 * tmp[up * w + x] + k1 * tmp[y * w + x] + k0 * tmp[down * w + x];
        }
    }
}

/// The full six-transform composition, seeded by `seed`.
pub fn augment(clip: &Clip, seed: u64) -> Clip {
    augment_with(clip, AugmentStrategy::More, seed).0
}

pub fn augment_with(clip: &Clip, strategy: AugmentStrategy, seed: u64) -> (Clip, AugmentParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match strategy {
        AugmentStrategy::None => AugmentParams::default(),
        AugmentStrategy::Less => AugmentParams::sample_less(&mut rng),
        AugmentStrategy::More => AugmentParams::sample(&mut rng),
    };
    let data = params.apply(&clip.data);
    (
        Clip {
            data,
            ..clip.clone()
        },
        params,
    )
}

/// [`augment`] plus the parameters each frame received.
pub fn augment_traced(clip: &Clip, seed: u64) -> (Clip, Vec<AugmentParams>) {
    let params = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut trace = Vec::new();
    let data = params.apply_traced(&clip.data, &mut trace);
    (
        Clip {
            data,
            ..clip.clone()
        },
        trace,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CLIP_LEN;
    use proptest::prelude::*;

    fn clip(seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Clip::new(Tensor::uniform(&[CLIP_LEN, 3, 6, 5], 0.0, 1.0, &mut rng), "v", 0).unwrap()
    }

    #[test]
    fn seed_with_no_transform_is_identity() {
        let seed = (0..1000u64)
            .find(|&s| AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(s)).is_identity())
            .expect("about 1 in 64 seeds fire nothing");
        let c = clip(1);
        assert_eq!(augment(&c, seed), c);
    }

    #[test]
    fn flip_twice_restores() {
        let c = clip(2);
        let p = AugmentParams {
            flip: true,
            ..Default::default()
        };
        assert_eq!(p.apply(&p.apply(&c.data)), c.data);
        assert_ne!(p.apply(&c.data), c.data);
    }

    #[test]
    fn all_frames_share_parameters() {
        let (_, trace) = augment_traced(&clip(3), 11);
        assert_eq!(trace.len(), CLIP_LEN);
        assert_eq!(trace[0], trace[CLIP_LEN - 1]);
        assert!(trace.iter().all(|p| *p == trace[0]));
    }

    #[test]
    fn less_fires_exactly_one_transform() {
        for s in 0..50 {
            let p = AugmentParams::sample_less(&mut ChaCha8Rng::seed_from_u64(s));
            let fired = p.flip as usize + p.brighten.is_some() as usize + p.darken.is_some() as usize;
            assert_eq!(fired, 1);
            assert!(p.blur_sigma.is_none() && p.saturation.is_none() && p.contrast.is_none());
        }
    }

    #[test]
    fn blur_preserves_constant_frames() {
        let mut ch = vec![0.4f32; 12];
        gaussian_blur3(&mut ch, 3, 4, 0.8);
        assert!(ch.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    proptest! {
        #[test]
        fn augment_is_pure_and_stays_in_range(seed in any::<u64>(), data_seed in 0u64..50) {
            let c = clip(data_seed);
            let a = augment(&c, seed);
            prop_assert_eq!(&a, &augment(&c, seed));
            prop_assert!(a.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a.data.shape(), c.data.shape());
        }
    }
}
