use serde::{Deserialize, Serialize};

use super::Episode;

/// Per-feature rescaling statistics, computed on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Mean of the rescaled training observations per feature.
    pub global_mean: Vec<f64>,
    pub alpha_hours: f64,
}

impl NormalizationStats {
    pub fn d_m(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = self.min.len();
        if self.max.len() != d || self.global_mean.len() != d {
            return Err("min/max/global_mean lengths differ".into());
        }
        if !(self.alpha_hours > 0.0) {
            return Err("alpha_hours must be positive".into());
        }
        for j in 0..d {
            if self.min[j] > self.max[j] {
                return Err(format!("feature {j}: min > max"));
            }
            if !(0.0..=1.0).contains(&self.global_mean[j]) {
                return Err(format!("feature {j}: global mean outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// `(v - min) / (max - min)` clipped to `[0, 1]`; constant features map
    /// to 0.5.
    pub fn rescale(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.min[feature], self.max[feature]);
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    }
}

/// Drops observations at or after the prediction horizon and notes taken
/// after it, then drops episodes left without notes.
pub fn window(episodes: Vec<Episode>, alpha_hours: f64) -> Vec<Episode> {
    let before = episodes.len();
    let kept: Vec<Episode> = episodes
        .into_iter()
        .filter_map(|mut e| {
            e.observations.retain(|o| o.time < alpha_hours);
            e.notes.retain(|n| n.time <= alpha_hours);
            (!e.notes.is_empty()).then_some(e)
        })
        .collect();
    if kept.len() < before {
        log::info!(
            "windowing removed {} episode(s) without notes before {alpha_hours} h",
            before - kept.len()
        );
    }
    kept
}

pub fn compute_stats(episodes: &[Episode], d_m: usize, alpha_hours: f64) -> NormalizationStats {
    let mut min = vec![f64::INFINITY; d_m];
    let mut max = vec![f64::NEG_INFINITY; d_m];
    for o in episodes.iter().flat_map(|e| &e.observations) {
        min[o.feature] = min[o.feature].min(o.value);
        max[o.feature] = max[o.feature].max(o.value);
    }
    for j in 0..d_m {
        if min[j] > max[j] {
            min[j] = 0.0;
            max[j] = 0.0;
        }
    }
    let mut stats = NormalizationStats {
        min,
        max,
        global_mean: vec![0.5; d_m],
        alpha_hours,
    };
    let mut sum = vec![0.0; d_m];
    let mut count = vec![0usize; d_m];
    for o in episodes.iter().flat_map(|e| &e.observations) {
        sum[o.feature] += stats.rescale(o.feature, o.value);
        count[o.feature] += 1;
    }
    for j in 0..d_m {
        if count[j] > 0 {
            stats.global_mean[j] = sum[j] / count[j] as f64;
        }
    }
    stats
}

/// Rescales values per feature and times by the horizon. With `stats = None`
/// the episodes are treated as the training split and the statistics are
/// computed from them.
pub fn normalize(
    episodes: &[Episode],
    stats: Option<&NormalizationStats>,
    d_m: usize,
    alpha_hours: f64,
) -> (Vec<Episode>, NormalizationStats) {
    let stats = match stats {
        Some(s) => s.clone(),
        None => compute_stats(episodes, d_m, alpha_hours),
    };
    let h = stats.alpha_hours;
    let out = episodes
        .iter()
        .map(|e| {
            let mut e = e.clone();
            for o in &mut e.observations {
                o.value = stats.rescale(o.feature, o.value);
                o.time = (o.time / h).clamp(0.0, 1.0);
            }
            for n in &mut e.notes {
                n.time = (n.time / h).clamp(0.0, 1.0);
            }
            e
        })
        .collect();
    (out, stats)
}
