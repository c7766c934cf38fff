use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::LabelPair;

/// One manifest line: a clip file and the labels of the video it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub clip_path: PathBuf,
    pub continuous: f32,
    pub categorical: usize,
    pub video_id: String,
    pub subject_id: String,
}

impl SampleRecord {
    pub fn labels(&self) -> LabelPair {
        LabelPair {
            continuous: self.continuous,
            categorical: self.categorical,
        }
    }
}

/// Records plus the directory relative clip paths are resolved against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.clip_path.is_absolute() {
            record.clip_path.clone()
        } else {
            self.base_dir.join(&record.clip_path)
        }
    }

    /// Distinct videos with their categorical label, sorted by id.
    pub fn videos(&self) -> Vec<(String, usize)> {
        let map: BTreeMap<&str, usize> = self
            .records
            .iter()
            .map(|r| (r.video_id.as_str(), r.categorical))
            .collect();
        map.into_iter().map(|(v, c)| (v.to_string(), c)).collect()
    }

    /// Records whose video is in `ids`, keeping manifest order.
    pub fn subset(&self, ids: &[String]) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.video_id))
                .cloned()
                .collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Parses a tab-separated manifest; every clip of a video must carry the same labels.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let err = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    let mut labels: BTreeMap<String, (f32, usize)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(err(line_no, format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let continuous: f32 = fields[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad continuous label {:?}", fields[1])))?;
        if !(0.0..=1.0).contains(&continuous) {
            return Err(err(line_no, format!("continuous label {continuous} outside [0, 1]")));
        }
        let categorical: usize = fields[2]
            .parse()
            .map_err(|_| err(line_no, format!("bad categorical label {:?}", fields[2])))?;
        let video_id = fields[3].to_string();
        if video_id.is_empty() {
            return Err(err(line_no, "empty video id".into()));
        }
        match labels.get(&video_id) {
            Some(&prev) if prev != (continuous, categorical) => {
                return Err(err(line_no, format!("video {video_id} has conflicting labels")));
            }
            _ => {
                labels.insert(video_id.clone(), (continuous, categorical));
            }
        }
        records.push(SampleRecord {
            clip_path: PathBuf::from(fields[0]),
            continuous,
            categorical,
            video_id,
            subject_id: fields[4].to_string(),
        });
    }
    Ok(Manifest {
        records,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::from("# clip_path\tcontinuous_label\tcategorical_label\tvideo_id\tsubject_id\n");
    for r in records {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}",
            r.clip_path.display(),
            r.continuous,
            r.categorical,
            r.video_id,
            r.subject_id
        )
        .expect("writing to a String");
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(video: &str, continuous: f32, categorical: usize) -> SampleRecord {
        SampleRecord {
            clip_path: PathBuf::from(format!("clips/{video}_000.vfc")),
            continuous,
            categorical,
            video_id: video.into(),
            subject_id: "s0".into(),
        }
    }

    #[test]
    fn round_trip_preserves_labels_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let records = vec![record("v0", 0.1 + 0.2, 0), record("v1", 0.8125, 1)];
        write_manifest(&path, &records).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.records, records);
        assert_eq!(m.resolve(&m.records[0]), dir.path().join("clips/v0_000.vfc"));
        assert_eq!(m.videos(), vec![("v0".into(), 0), ("v1".into(), 1)]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "# header\na.vfc\t0.5\t1\tv0\ts0\nb.vfc\t0.5\n").unwrap();
        match read_manifest(&path).unwrap_err() {
            Error::Manifest { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        fs::write(&path, "a.vfc\t0.5\t1\tv0\ts0\nb.vfc\t0.25\t0\tv0\ts0\n").unwrap();
        assert!(read_manifest(&path).unwrap_err().to_string().contains("conflicting"));
        fs::write(&path, "a.vfc\t1.5\t1\tv0\ts0\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
