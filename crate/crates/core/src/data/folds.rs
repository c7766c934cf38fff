use rand::seq::SliceRandom;

use crate::error::{ensure, Result};

use super::synth::derive_rng;

/// Train and validation video ids of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Stratified `k`-fold split over videos. Videos are shuffled within each
/// label, then dealt round-robin so every fold gets a near-equal share of each label.
pub fn kfold_split(videos: &[(String, usize)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    ensure!(k >= 2, "k must be at least 2, got {k}");
    ensure!(
        videos.len() >= k,
        "{} videos cannot be split into {k} folds",
        videos.len()
    );
    let mut sorted: Vec<&(String, usize)> = videos.iter().collect();
    sorted.sort();
    sorted.dedup_by(|a, b| a.0 == b.0);
    ensure!(sorted.len() == videos.len(), "video ids must be unique");

    let mut rng = derive_rng(seed, 0);
    let max_label = sorted.iter().map(|v| v.1).max().unwrap_or(0);
    let mut slot = 0;
    let mut val: Vec<Vec<String>> = vec![Vec::new(); k];
    for label in 0..=max_label {
        let mut group: Vec<&String> = sorted.iter().filter(|v| v.1 == label).map(|v| &v.0).collect();
        group.shuffle(&mut rng);
        for id in group {
            val[slot % k].push(id.clone());
            slot += 1;
        }
    }
    Ok(val
        .iter()
        .map(|v| Fold {
            train: sorted
                .iter()
                .map(|s| s.0.clone())
                .filter(|id| !v.contains(id))
                .collect(),
            val: {
                let mut v = v.clone();
                v.sort();
                v
            },
        })
        .collect())
}
