use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::model::CLIP_LEN;
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"VFC1";

/// A 32-frame `T×3×H×W` segment of one video with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub data: Tensor,
    pub video_id: String,
    pub clip_index: usize,
}

impl Clip {
    pub fn new(data: Tensor, video_id: impl Into<String>, clip_index: usize) -> Result<Self> {
        let s = data.shape();
        ensure!(
            s.len() == 4 && s[0] == CLIP_LEN && s[1] == 3,
            "clip must be {CLIP_LEN}×3×H×W, got {s:?}"
        );
        ensure!(
            data.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "clip values must lie in [0, 1]"
        );
        Ok(Self {
            data,
            video_id: video_id.into(),
            clip_index,
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Cuts consecutive non-overlapping 32-frame clips; a shorter tail is dropped.
pub fn split_clips(frames: &Tensor, video_id: &str) -> Result<Vec<Clip>> {
    let s = frames.shape();
    ensure!(s.len() == 4 && s[1] == 3, "video must be T×3×H×W, got {s:?}");
    ensure!(s[0] >= CLIP_LEN, "video {video_id} has {} frames, need at least {CLIP_LEN}", s[0]);
    let frame_len = s[1] * s[2] * s[3];
    let clip_len = CLIP_LEN * frame_len;
    frames
        .data()
        .chunks_exact(clip_len)
        .enumerate()
        .map(|(i, chunk)| Clip::new(Tensor::new(&[CLIP_LEN, s[1], s[2], s[3]], chunk.to_vec())?, video_id, i))
        .collect()
}

/// Serializes a rank-4 tensor as `VFC1`: magic, four `u32` extents, then `f32` values.
pub fn encode_clip(data: &Tensor) -> Result<Vec<u8>> {
    ensure!(data.rank() == 4, "clip files hold rank-4 tensors, got {:?}", data.shape());
    let mut out = Vec::with_capacity(20 + 4 * data.numel());
    out.extend_from_slice(CLIP_MAGIC);
    for &d in data.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 20 {
        return Err(format!("file is {} bytes, shorter than the 20-byte header", bytes.len()));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(format!("bad magic bytes {:?}, expected \"VFC1\"", &bytes[..4]));
    }
    let extents: Vec<usize> = bytes[4..20]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let count = extents.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let body = &bytes[20..];
    match count.and_then(|c| c.checked_mul(4)) {
        Some(len) if len == body.len() => {}
        _ => return Err(format!("extents {extents:?} do not match {} payload bytes", body.len())),
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(&extents, values).map_err(|e| e.to_string())
}

pub fn write_clip(path: &Path, data: &Tensor) -> Result<()> {
    let bytes = encode_clip(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_clip(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_clip(&bytes).map_err(|msg| Error::ClipFormat {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(frames: usize) -> Tensor {
        Tensor::from_fn(&[frames, 3, 2, 2], |i| (i % 97) as f32 / 96.0)
    }

    #[test]
    fn split_counts_and_remainder() {
        let clips = split_clips(&video(96), "v").unwrap();
        assert_eq!(clips.iter().map(|c| c.clip_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(split_clips(&video(100), "v").unwrap().len(), 3);
        let v = video(32);
        let one = split_clips(&v, "v").unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].data, v);
        assert!(split_clips(&video(31), "v").is_err());
    }

    #[test]
    fn second_clip_starts_at_frame_32() {
        let v = video(64);
        let clips = split_clips(&v, "v").unwrap();
        assert_eq!(clips[1].data.get(&[0, 1, 1, 0]), v.get(&[32, 1, 1, 0]));
    }

    #[test]
    fn round_trip_and_format_errors() {
        let v = video(32);
        let bytes = encode_clip(&v).unwrap();
        assert_eq!(&bytes[..4], b"VFC1");
        assert_eq!(&bytes[4..8], &32u32.to_le_bytes());
        assert_eq!(decode_clip(&bytes).unwrap(), v);
        assert!(decode_clip(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_clip(&bad).unwrap_err().contains("magic"));
    }

    #[test]
    fn clip_rejects_out_of_range_values() {
        let t = Tensor::full(&[32, 3, 2, 2], 1.5);
        assert!(Clip::new(t, "v", 0).is_err());
    }
}
