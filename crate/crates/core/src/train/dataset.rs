use std::collections::HashMap;

use crate::data::{read_clip, Clip, Manifest, SynthSample};
use crate::error::{ensure, Result};
use crate::heads::LabelPair;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: Clip,
    pub labels: LabelPair,
}

/// Clips held in memory with their video labels.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Reads every clip a manifest lists; clip indices count up per video in manifest order.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut per_video: HashMap<&str, usize> = HashMap::new();
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                let data = read_clip(&manifest.resolve(r))?;
                let index = per_video.entry(r.video_id.as_str()).or_default();
                let clip = Clip::new(data, r.video_id.clone(), *index)?;
                *index += 1;
                Ok(Sample {
                    clip,
                    labels: r.labels(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn from_synth(samples: &[SynthSample]) -> Self {
        Self {
            samples: samples
                .iter()
                .map(|s| Sample {
                    clip: s.clip.clone(),
                    labels: s.labels,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct videos with their categorical label, sorted by id.
    pub fn videos(&self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self
            .samples
            .iter()
            .map(|s| (s.clip.video_id.clone(), s.labels.categorical))
            .collect();
        v.sort();
        v.dedup_by(|a, b| a.0 == b.0);
        v
    }

    /// Samples whose video is in `ids`.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        Dataset {
            samples: self
                .samples
                .iter()
                .filter(|s| ids.contains(&s.clip.video_id))
                .cloned()
                .collect(),
        }
    }
}

/// Stacks `T×3×H×W` clips into an `N×3×T×H×W` batch.
pub(crate) fn stack_clips<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for c in clips {
        let p = c.permute(&[1, 0, 2, 3])?;
        match &shape {
            None => shape = Some(p.shape().to_vec()),
            Some(s) => ensure!(s == p.shape(), "clips in a batch must share a shape"),
        }
        data.extend_from_slice(p.data());
        n += 1;
    }
    let s = shape.ok_or_else(|| crate::Error::Contract("empty batch".into()))?;
    Tensor::new(&[n, s[0], s[1], s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacking_moves_channels_first() {
        let a = Tensor::from_fn(&[2, 3, 1, 2], |i| i as f32);
        let b = a.map(|v| v + 100.0);
        let batch = stack_clips([&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 2, 1, 2]);
        assert_eq!(batch.get(&[0, 2, 1, 0, 1]), a.get(&[1, 2, 0, 1]));
        assert_eq!(batch.get(&[1, 0, 0, 0, 0]), 100.0);
    }
}
