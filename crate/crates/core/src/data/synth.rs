//! Deterministic schematic face videos whose blink rate, eyelid droop and
//! yawning depend on a per-video fatigue level.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::heads::{normalize_labels, LabelPair};
use crate::tensor::Tensor;

use super::clip::{split_clips, write_clip, Clip};
use super::manifest::{write_manifest, Manifest, SampleRecord};

/// Generator stream `stream` of master seed `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How per-video fatigue levels are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FatigueSampling {
    /// Uniform on `[0, 1]`.
    #[default]
    Uniform,
    /// Uniform on `[0, 0.25] ∪ [0.75, 1]`, i.e. ratings ≤ 2 or ≥ 4.
    Extremes,
}

impl std::str::FromStr for FatigueSampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "extremes" => Ok(Self::Extremes),
            other => Err(format!("unknown fatigue sampling {other:?} (expected uniform|extremes)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub fps: f32,
    /// Blinks per second at full fatigue and when fully alert.
    pub blink_rate_min: f32,
    pub blink_rate_max: f32,
    /// Fraction of the eye aperture covered by the lid at full fatigue.
    pub max_droop: f32,
    /// Per-frame probability of a mouth-opening event at full fatigue.
    pub yawn_probability: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    pub seed: u64,
    /// Number of categorical label bins.
    pub k: usize,
    pub sampling: FatigueSampling,
    pub videos_per_subject: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_videos: 16,
            frames_per_video: 32,
            image_size: 112,
            fps: 30.0,
            blink_rate_min: 0.3,
            blink_rate_max: 1.5,
            max_droop: 0.6,
            yawn_probability: 0.02,
            noise: 0.03,
            seed: 0,
            k: 2,
            sampling: FatigueSampling::Uniform,
            videos_per_subject: 2,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_videos >= 1, "n_videos must be positive");
        ensure!(self.frames_per_video >= 32, "videos need at least 32 frames");
        ensure!(self.image_size >= 16, "image size must be at least 16");
        ensure!(self.fps > 0.0, "fps must be positive");
        ensure!(
            0.0 < self.blink_rate_min && self.blink_rate_min <= self.blink_rate_max,
            "blink-rate range must satisfy 0 < min <= max"
        );
        ensure!((0.0..1.0).contains(&self.max_droop), "max droop must lie in [0, 1)");
        ensure!((0.0..=1.0).contains(&self.yawn_probability), "yawn probability must lie in [0, 1]");
        ensure!(self.noise >= 0.0, "noise must be non-negative");
        ensure!(self.k >= 2, "k must be at least 2");
        ensure!(self.videos_per_subject >= 1, "videos_per_subject must be positive");
        Ok(())
    }

    /// `λ = λ_max − fatigue·(λ_max − λ_min)`.
    pub fn blink_rate(&self, fatigue: f32) -> f32 {
        self.blink_rate_max - fatigue * (self.blink_rate_max - self.blink_rate_min)
    }

    pub fn droop(&self, fatigue: f32) -> f32 {
        fatigue * self.max_droop
    }

    pub fn video_id(index: usize) -> String {
        format!("v{index:04}")
    }
}

/// Generation parameters of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMeta {
    pub video_id: String,
    pub subject_id: String,
    pub fatigue: f32,
    /// `1 + 4·fatigue`.
    pub rating: f32,
    pub blink_rate: f32,
    pub droop: f32,
    pub labels: LabelPair,
}

/// Fills pixels inside an axis-aligned ellipse with one-pixel soft edges.
fn paint_ellipse(img: &mut [f32], size: usize, cx: f32, cy: f32, rx: f32, ry: f32, value: f32) {
    if rx <= 0.0 || ry <= 0.0 {
        return;
    }
    let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + ry + 1.0).ceil() as usize).min(size);
    let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + rx + 1.0).ceil() as usize).min(size);
    let scale = rx.min(ry);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = ((x as f32 + 0.5 - cx) / rx, (y as f32 + 0.5 - cy) / ry);
            let r = (dx * dx + dy * dy).sqrt();
            let alpha = ((1.0 - r) * scale + 0.5).clamp(0.0, 1.0);
            let p = &mut img[y * size + x];
            *p = *p * (1.0 - alpha) + value * alpha;
        }
    }
}

/// Renders video `index` as `frames×3×S×S` plus its generation parameters.
pub fn render_video(p: &SynthParams, index: usize) -> Result<(Tensor, VideoMeta)> {
    p.validate()?;
    let mut rng = derive_rng(p.seed, index as u64);
    let fatigue: f32 = match p.sampling {
        FatigueSampling::Uniform => rng.random(),
        FatigueSampling::Extremes => {
            let u: f32 = rng.random_range(0.0..0.25);
            if rng.random_bool(0.5) {
                u
            } else {
                1.0 - u
            }
        }
    };
    let rating = 1.0 + 4.0 * fatigue;
    let labels = normalize_labels(rating, p.k)?;
    let blink_rate = p.blink_rate(fatigue);
    let droop = p.droop(fatigue);
    let meta = VideoMeta {
        video_id: SynthParams::video_id(index),
        subject_id: format!("s{:04}", index / p.videos_per_subject),
        fatigue,
        rating,
        blink_rate,
        droop,
        labels,
    };

    let s = p.image_size as f32;
    let jitter_x = rng.random_range(-0.03..0.03) * s;
    let jitter_y = rng.random_range(-0.03..0.03) * s;
    let skin = rng.random_range(0.65..0.8);
    let background = rng.random_range(0.15..0.3);
    let blink_phase: f32 = rng.random();
    let blink_frames = 0.2 * p.fps;

    let n = p.image_size;
    let plane = n * n;
    let mut data = Vec::with_capacity(p.frames_per_video * 3 * plane);
    let mut yawn_left = 0usize;
    const YAWN_FRAMES: usize = 24;
    for f in 0..p.frames_per_video {
        // Blinks close the eye with a triangular profile around each blink onset.
        let period = p.fps / blink_rate;
        let pos = (f as f32 / period + blink_phase).fract() * period;
        let closure = if pos < blink_frames {
            1.0 - (2.0 * pos / blink_frames - 1.0).abs()
        } else {
            0.0
        };
        let openness = (1.0 - droop) * (1.0 - closure);
        if yawn_left == 0 && rng.random::<f32>() < p.yawn_probability * fatigue {
            yawn_left = YAWN_FRAMES;
        }
        let mouth_open = if yawn_left > 0 {
            let phase = (YAWN_FRAMES - yawn_left) as f32 / YAWN_FRAMES as f32;
            yawn_left -= 1;
            (std::f32::consts::PI * phase).sin()
        } else {
            0.0
        };

        let mut img = vec![background; plane];
        let (cx, cy) = (0.5 * s + jitter_x, 0.55 * s + jitter_y);
        paint_ellipse(&mut img, n, cx, cy, 0.35 * s, 0.42 * s, skin);
        for ex in [cx - 0.15 * s, cx + 0.15 * s] {
            let ey = cy - 0.13 * s;
            paint_ellipse(&mut img, n, ex, ey, 0.09 * s, 0.05 * s, 0.95);
            paint_ellipse(&mut img, n, ex, ey, 0.09 * s, 0.05 * s * openness, 0.08);
        }
        paint_ellipse(&mut img, n, cx, cy + 0.17 * s, 0.12 * s, 0.015 * s + 0.08 * s * mouth_open, 0.15);
        for v in img.iter_mut() {
            let noise: f32 = rng.sample(StandardNormal);
            *v = (*v + p.noise * noise).clamp(0.0, 1.0);
        }
        for _ in 0..3 {
            data.extend_from_slice(&img);
        }
    }
    Ok((Tensor::new(&[p.frames_per_video, 3, n, n], data)?, meta))
}

/// One clip of a synthetic video together with its labels.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub clip: Clip,
    pub labels: LabelPair,
    pub subject_id: String,
}

/// Renders every video and splits it into clips, without touching the disk.
pub fn synth_dataset(p: &SynthParams) -> Result<(Vec<SynthSample>, Vec<VideoMeta>)> {
    p.validate()?;
    let mut samples = Vec::new();
    let mut metas = Vec::new();
    for i in 0..p.n_videos {
        let (frames, meta) = render_video(p, i)?;
        for clip in split_clips(&frames, &meta.video_id)? {
            samples.push(SynthSample {
                clip,
                labels: meta.labels,
                subject_id: meta.subject_id.clone(),
            });
        }
        metas.push(meta);
    }
    Ok((samples, metas))
}

/// Writes clips under `out_dir/clips`, `manifest.tsv`, and `synth_videos.tsv`
/// with the per-video generation parameters.
pub fn synth_generate(p: &SynthParams, out_dir: &Path) -> Result<Manifest> {
    p.validate()?;
    let clip_dir = out_dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(format!("creating {}", clip_dir.display()), e))?;
    let mut records = Vec::new();
    let mut videos = String::from("# video_id\tsubject_id\tfatigue\trating\tblink_rate\tdroop\n");
    for i in 0..p.n_videos {
        let (frames, meta) = render_video(p, i)?;
        for clip in split_clips(&frames, &meta.video_id)? {
            let rel = PathBuf::from("clips").join(format!("{}_{:03}.vfc", meta.video_id, clip.clip_index));
            write_clip(&out_dir.join(&rel), &clip.data)?;
            records.push(SampleRecord {
                clip_path: rel,
                continuous: meta.labels.continuous,
                categorical: meta.labels.categorical,
                video_id: meta.video_id.clone(),
                subject_id: meta.subject_id.clone(),
            });
        }
        writeln!(
            videos,
            "{}\t{}\t{}\t{}\t{}\t{}",
            meta.video_id, meta.subject_id, meta.fatigue, meta.rating, meta.blink_rate, meta.droop
        )
        .expect("writing to a String");
    }
    write_manifest(&out_dir.join("manifest.tsv"), &records)?;
    let sidecar = out_dir.join("synth_videos.tsv");
    fs::write(&sidecar, videos).map_err(|e| Error::io(format!("writing {}", sidecar.display()), e))?;
    Ok(Manifest {
        records,
        base_dir: out_dir.to_path_buf(),
    })
}
