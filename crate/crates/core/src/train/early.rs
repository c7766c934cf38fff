/// Early-stopping verdict over a series of per-epoch validation losses, where
/// `series[i]` belongs to epoch `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue { best_epoch: usize },
    Stop { best_epoch: usize, stop_epoch: usize },
}

impl EarlyStop {
    pub fn best_epoch(&self) -> usize {
        match *self {
            Self::Continue { best_epoch } | Self::Stop { best_epoch, .. } => best_epoch,
        }
    }

    pub fn should_stop(&self) -> bool {
        matches!(self, Self::Stop { .. })
    }
}

/// Stops once `patience` epochs pass without a strictly lower loss than the
/// best so far. Ties count as no improvement; the earliest minimum wins.
pub fn early_stop_check(val_losses: &[f32], patience: usize) -> EarlyStop {
    assert!(!val_losses.is_empty(), "early_stop_check needs at least one epoch");
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate() {
        if v < val_losses[best] {
            best = i;
        }
    }
    let best_epoch = best + 1;
    let last_epoch = val_losses.len();
    if last_epoch - best_epoch >= patience {
        EarlyStop::Stop {
            best_epoch,
            stop_epoch: last_epoch,
        }
    } else {
        EarlyStop::Continue { best_epoch }
    }
}
