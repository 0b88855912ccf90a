//! Preprocessing pipeline, training loop, checkpoints and evaluation.

mod config;
mod train;

pub use config::{RunConfig, Task};
pub use train::{ablate, train, train_prepared, AblationRow, EpochRecord, TrainOutcome};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{normalize, truncate_notes, window, Episode, NormalizationStats, NotePayload};
use crate::error::{DataError, Error, Result};
use crate::metrics::{f1_binary, macro_f1, EvalReport};
use crate::model::{prepare, Modality, Model, PreparedEpisode, TsEmbed};
use crate::nn::{ParamStore, Scope};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tape;

/// Rejects episodes that do not fit the configured task.
pub fn check_schema(episodes: &[Episode], cfg: &RunConfig) -> Result<(), DataError> {
    let l = cfg.task.n_labels();
    for e in episodes {
        if e.label.len() != l {
            return Err(DataError::Schema(format!(
                "episode {}: {} label(s), task {} expects {l}",
                e.id,
                e.label.len(),
                cfg.task
            )));
        }
        if let Some(o) = e.observations.iter().find(|o| o.feature >= cfg.d_m) {
            return Err(DataError::Schema(format!(
                "episode {}: feature {} outside d_m = {}",
                e.id, o.feature, cfg.d_m
            )));
        }
        for n in &e.notes {
            if let NotePayload::Embedding(v) = &n.payload {
                if v.len() != cfg.d_t {
                    return Err(DataError::Schema(format!(
                        "episode {}: note embedding of length {} (d_t = {})",
                        e.id,
                        v.len(),
                        cfg.d_t
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Windowing, note truncation, normalisation and grid preparation. Without
/// `stats` the episodes are the training split and define the statistics.
pub fn preprocess(
    raw: &[Episode],
    stats: Option<&NormalizationStats>,
    cfg: &RunConfig,
) -> Result<(Vec<PreparedEpisode>, NormalizationStats), DataError> {
    check_schema(raw, cfg)?;
    let kept: Vec<Episode> = window(raw.to_vec(), cfg.alpha_hours)
        .into_iter()
        .map(|e| truncate_notes(e, cfg.max_notes))
        .collect();
    let (normed, stats) = normalize(&kept, stats, cfg.d_m, cfg.alpha_hours);
    let mc = cfg.model_config();
    let prepared = normed
        .iter()
        .map(|e| prepare(e, &stats, &mc))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((prepared, stats))
}

/// Best-validation parameter snapshot plus what is needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stats: NormalizationStats,
    pub params: ParamStore,
    /// 0 is the initialisation.
    pub epoch: usize,
    pub metric_name: String,
    pub metric: f64,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.config.model_config(), self.params.seed())?;
        if !m.params.same_layout(&self.params) {
            return Err(DataError::Schema("checkpoint parameters do not match its configuration".into()).into());
        }
        m.params = self.params.clone();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Sigmoid probabilities, one row per episode.
pub fn score(model: &Model, episodes: &[PreparedEpisode]) -> Result<Vec<Vec<f64>>> {
    episodes
        .iter()
        .map(|ep| {
            let tape = Tape::new();
            let logits = model.forward(Scope::new(&tape, &model.params), ep)?.value();
            if !logits.is_finite() {
                return Err(Error::NonFinite {
                    epoch: 0,
                    batch: 0,
                    lr: 0.0,
                });
            }
            Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
        })
        .collect()
}

pub(crate) fn labels_u8(episodes: &[PreparedEpisode]) -> Vec<Vec<u8>> {
    episodes
        .iter()
        .map(|e| e.label.iter().map(|&y| u8::from(y > 0.5)).collect())
        .collect()
}

/// F1 for binary tasks, macro-F1 for multi-label tasks.
pub fn selection_metric(scores: &[Vec<f64>], labels: &[Vec<u8>], cfg: &RunConfig) -> Result<f64> {
    Ok(if cfg.task.n_labels() == 1 {
        let s: Vec<f64> = scores.iter().map(|r| r[0]).collect();
        let y: Vec<u8> = labels.iter().map(|r| r[0]).collect();
        f1_binary(&s, &y, cfg.threshold)?
    } else {
        macro_f1(scores, labels, cfg.threshold)?
    })
}

fn prepared_for(ckpt: &Checkpoint, raw: &[Episode]) -> Result<Vec<PreparedEpisode>> {
    if raw.is_empty() {
        return Err(DataError::Schema("no episodes to evaluate".into()).into());
    }
    let (prepared, _) = preprocess(raw, Some(&ckpt.stats), &ckpt.config)?;
    if prepared.is_empty() {
        return Err(DataError::Window("no episode has a note before the horizon".into()).into());
    }
    Ok(prepared)
}

pub fn evaluate_prepared(model: &Model, cfg: &RunConfig, episodes: &[PreparedEpisode]) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(DataError::Schema("no episodes to evaluate".into()).into());
    }
    let scores = score(model, episodes)?;
    Ok(EvalReport::compute(&scores, &labels_u8(episodes), cfg.threshold)?)
}

pub fn evaluate(ckpt: &Checkpoint, raw: &[Episode]) -> Result<EvalReport> {
    let prepared = prepared_for(ckpt, raw)?;
    evaluate_prepared(&ckpt.model()?, &ckpt.config, &prepared)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probs: Vec<f64>,
}

pub fn predict(ckpt: &Checkpoint, raw: &[Episode]) -> Result<Vec<Prediction>> {
    let prepared = prepared_for(ckpt, raw)?;
    let scores = score(&ckpt.model()?, &prepared)?;
    Ok(prepared
        .into_iter()
        .zip(scores)
        .map(|(e, probs)| Prediction { id: e.id, probs })
        .collect())
}

/// Per-episode mean of the UTDE gate; `None` for models without a gate.
pub fn gate_means(ckpt: &Checkpoint, raw: &[Episode]) -> Result<Option<Vec<(String, f64)>>> {
    let model = ckpt.model()?;
    if model.config.modality == Modality::TxtOnly || model.config.ts_embed != TsEmbed::Utde {
        return Ok(None);
    }
    let prepared = prepared_for(ckpt, raw)?;
    let mut out = Vec::with_capacity(prepared.len());
    for ep in &prepared {
        let tape = Tape::new();
        let Some(g) = model.ts_stream(Scope::new(&tape, &model.params), ep)?.gate else {
            return Ok(None);
        };
        let g = g.value();
        out.push((ep.id.clone(), g.sum() / g.len() as f64));
    }
    Ok(Some(out))
}
