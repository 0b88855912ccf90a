use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_prepared, labels_u8, preprocess, score, selection_metric, Checkpoint, RunConfig};
use crate::data::{Episode, NormalizationStats};
use crate::error::{ConfigError, DataError, Error, Result};
use crate::metrics::{aggregate, AggregateReport, EvalReport};
use crate::model::{Modality, Model, PreparedEpisode, TsEmbed};
use crate::nn::Scope;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for epoch 0 (initialisation).
    pub train_loss: Option<f64>,
    pub val_metric: f64,
    pub best_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

pub fn train(cfg: &RunConfig, train_raw: &[Episode], val_raw: &[Episode]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (tr, stats) = preprocess(train_raw, None, cfg)?;
    let (va, _) = preprocess(val_raw, Some(&stats), cfg)?;
    train_prepared(cfg, &tr, &va, stats)
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        for g in grads {
            g.scale_assign(max_norm / norm);
        }
    }
}

/// Mini-batch Adam on mean BCE, keeping the parameters with the best
/// validation metric (strict improvement, initialisation included).
pub fn train_prepared(
    cfg: &RunConfig,
    train: &[PreparedEpisode],
    val: &[PreparedEpisode],
    stats: NormalizationStats,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.require_seed()?;
    if train.is_empty() || val.is_empty() {
        return Err(DataError::Schema("training and validation splits must be non-empty".into()).into());
    }
    let mut model = Model::new(cfg.model_config(), seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params.values(),
    );
    let val_labels = labels_u8(val);
    let val_metric = |m: &Model| -> Result<f64> { selection_metric(&score(m, val)?, &val_labels, cfg) };

    let mut best = val_metric(&model)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_metric: best,
        best_metric: best,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = model.params.values().iter().map(Tensor::zeros_like).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let tape = Tape::new();
                let loss = model.loss(Scope::new(&tape, &model.params), &train[i], cfg.pos_weight)?;
                let value = loss.value().data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        batch: b,
                        lr: cfg.lr,
                    });
                }
                batch_loss += value;
                model.params.accumulate_grads(&loss.backward()?, &mut grads);
            }
            let n = batch.len() as f64;
            for g in &mut grads {
                g.scale_assign(1.0 / n);
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam.step(model.params.values_mut(), &grads);
            total += batch_loss;
        }
        let train_loss = total / train.len() as f64;
        let metric = val_metric(&model)?;
        if metric > best {
            best = metric;
            best_params = model.params.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} val {} {metric:.4}",
            cfg.task.selection_metric()
        );
        history.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            val_metric: metric,
            best_metric: best,
        });
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            stats,
            params: best_params,
            epoch: best_epoch,
            metric_name: cfg.task.selection_metric().to_string(),
            metric: best,
        },
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub ts_embed: TsEmbed,
    pub text_irregularity: bool,
    pub reports: Vec<EvalReport>,
    pub aggregate: AggregateReport,
}

/// Test-set reports for every numeric-embedding choice, with and without
/// note-time interpolation when notes are used, over `seeds`.
pub fn ablate(
    cfg: &RunConfig,
    train_raw: &[Episode],
    val_raw: &[Episode],
    test_raw: &[Episode],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(ConfigError("ablation needs at least one seed".into()).into());
    }
    cfg.validate()?;
    let (tr, stats) = preprocess(train_raw, None, cfg)?;
    let (va, _) = preprocess(val_raw, Some(&stats), cfg)?;
    let (te, _) = preprocess(test_raw, Some(&stats), cfg)?;
    let irregularity: &[bool] = if cfg.modality == Modality::TsOnly {
        &[true]
    } else {
        &[true, false]
    };
    let mut rows = Vec::new();
    for &ts_embed in &[TsEmbed::Utde, TsEmbed::Imputation, TsEmbed::Mtand] {
        for &text_irregularity in irregularity {
            let mut reports = Vec::new();
            for &seed in seeds {
                let run = RunConfig {
                    ts_embed,
                    text_irregularity,
                    seed: Some(seed),
                    ..cfg.clone()
                };
                let out = train_prepared(&run, &tr, &va, stats.clone())?;
                reports.push(evaluate_prepared(&out.checkpoint.model()?, &run, &te)?);
            }
            rows.push(AblationRow {
                ts_embed,
                text_irregularity,
                aggregate: aggregate(&reports)?,
                reports,
            });
        }
    }
    Ok(rows)
}
