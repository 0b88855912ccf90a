mod common;

use common::*;
use ehrfuse_core::data::{
    compute_stats, generate_with_latents, load_episodes, normalize, save_episodes, window, Episode, NoteEvent,
    NotePayload, SynthConfig, SynthTask, TaskSchema, TsObservation,
};
use ehrfuse_core::harness::{evaluate, gate_means, predict, preprocess, train, RunConfig};
use ehrfuse_core::model::{Modality, Model, TsEmbed};
use ehrfuse_core::nn::Scope;
use ehrfuse_core::tde::conv_embed;
use ehrfuse_core::tensor::{Tape, Tensor};
use ehrfuse_core::Error;

fn small(modality: Modality, ts_embed: TsEmbed, seed: u64) -> RunConfig {
    RunConfig {
        modality,
        ts_embed,
        epochs: 2,
        seed: Some(seed),
        alpha: 8,
        d_hidden: 8,
        ..desk_config()
    }
}

/// Accuracy of the best predictor that sees only `bit`: the majority label
/// within each value of the bit.
fn bayes_accuracy(pairs: &[(bool, u8)]) -> f64 {
    let mut counts = [[0usize; 2]; 2];
    for &(b, y) in pairs {
        counts[usize::from(b)][usize::from(y)] += 1;
    }
    let correct: usize = counts.iter().map(|c| c[0].max(c[1])).sum();
    correct as f64 / pairs.len() as f64
}

#[test]
fn xor_is_only_predictable_from_both_modalities() {
    let eps = generate_with_latents(&SynthConfig {
        n_episodes: 5000,
        d_m: 4,
        d_t: 8,
        alpha_hours: 24.0,
        sparsity: 0.3,
        task: SynthTask::XorFusion,
        seed: 77,
    })
    .unwrap();
    let ts: Vec<(bool, u8)> = eps.iter().map(|(e, l)| (l.ts_bit, e.label[0])).collect();
    let note: Vec<(bool, u8)> = eps.iter().map(|(e, l)| (l.note_bit, e.label[0])).collect();
    let joint = eps
        .iter()
        .filter(|(e, l)| e.label[0] == u8::from(l.ts_bit ^ l.note_bit))
        .count() as f64
        / eps.len() as f64;
    assert!((bayes_accuracy(&ts) - 0.5).abs() <= 0.03, "{}", bayes_accuracy(&ts));
    assert!((bayes_accuracy(&note) - 0.5).abs() <= 0.03, "{}", bayes_accuracy(&note));
    assert!(joint >= 0.95);
}

#[test]
fn normalized_splits_stay_in_the_unit_box() {
    let cfg = small(Modality::Fused, TsEmbed::Utde, 1);
    let (tr, va, te) = splits(SynthTask::TsOnly, 2, (200, 100, 100));
    let kept = |eps: &[Episode]| window(eps.to_vec(), cfg.alpha_hours);
    let (train_n, stats) = normalize(&kept(&tr), None, cfg.d_m, cfg.alpha_hours);
    for split in [
        train_n,
        normalize(&kept(&va), Some(&stats), cfg.d_m, cfg.alpha_hours).0,
        normalize(&kept(&te), Some(&stats), cfg.d_m, cfg.alpha_hours).0,
    ] {
        for e in &split {
            assert!(e
                .observations
                .iter()
                .all(|o| (0.0..=1.0).contains(&o.value) && (0.0..=1.0).contains(&o.time)));
            assert!(e.notes.iter().all(|n| (0.0..=1.0).contains(&n.time)));
        }
    }
    // held-out splits reuse the training statistics; their own would differ
    let (_, reused) = preprocess(&va, Some(&stats), &cfg).unwrap();
    assert_eq!(reused, stats);
    assert_ne!(compute_stats(&kept(&va), cfg.d_m, cfg.alpha_hours), stats);
}

#[test]
fn imputation_embedding_is_causal_in_time() {
    let cfg = small(Modality::TsOnly, TsEmbed::Imputation, 1).model_config();
    let model = Model::new(cfg.clone(), 1).unwrap();
    let conv = model.arch.conv.as_ref().unwrap();
    let base = Tensor::full(&[cfg.alpha, cfg.d_m], 0.3);
    for k in 0..cfg.alpha {
        let mut bumped = base.clone();
        for v in &mut bumped.data_mut()[k * cfg.d_m..(k + 1) * cfg.d_m] {
            *v += 1.0;
        }
        let tape = Tape::new();
        let s = Scope::new(&tape, &model.params);
        let a = conv_embed(s, s.constant(base.clone()), conv).unwrap().value();
        let b = conv_embed(s, s.constant(bumped), conv).unwrap().value();
        for r in 0..k {
            assert_eq!(a.row(r), b.row(r), "row {r} saw a change at step {k}");
        }
        assert_ne!(a.row(k), b.row(k));
    }
}

#[test]
fn gate_fixed_at_zero_trains_like_the_attention_only_model() {
    let (tr, va, _) = splits(SynthTask::TsOnly, 4, (120, 40, 1));
    let utde = RunConfig {
        gate_override: Some(0.0),
        ..small(Modality::TsOnly, TsEmbed::Utde, 5)
    };
    let mtand = small(Modality::TsOnly, TsEmbed::Mtand, 5);
    let a = train(&utde, &tr, &va).unwrap();
    let b = train(&mtand, &tr, &va).unwrap();
    assert_eq!(a.history, b.history);
    let pa = a.checkpoint.params.get(a.checkpoint.params.find("cls.out.w").unwrap());
    let pb = b.checkpoint.params.get(b.checkpoint.params.find("cls.out.w").unwrap());
    assert_eq!(pa, pb);
}

#[test]
fn training_reduces_the_loss_on_an_easy_task() {
    let (tr, va, _) = splits(SynthTask::NotesOnly, 6, (200, 60, 1));
    let cfg = RunConfig {
        lr: 1e-3,
        epochs: 4,
        ..small(Modality::Fused, TsEmbed::Utde, 2)
    };
    let out = train(&cfg, &tr, &va).unwrap();
    let losses: Vec<f64> = out.history.iter().filter_map(|r| r.train_loss).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    assert!(out
        .history
        .iter()
        .all(|r| r.best_metric >= r.val_metric || r.epoch == 0));
}

#[test]
fn every_variant_trains_predicts_and_reports_gates() {
    let (tr, va, te) = splits(SynthTask::XorFusion, 7, (40, 20, 20));
    for modality in [Modality::Fused, Modality::TsOnly, Modality::TxtOnly] {
        for ts_embed in [TsEmbed::Utde, TsEmbed::Imputation, TsEmbed::Mtand] {
            for text_irregularity in [true, false] {
                let cfg = RunConfig {
                    epochs: 1,
                    text_irregularity,
                    ..small(modality, ts_embed, 3)
                };
                let out = train(&cfg, &tr, &va).unwrap();
                let report = evaluate(&out.checkpoint, &te).unwrap();
                assert_eq!(report.n_examples, te.len());
                let preds = predict(&out.checkpoint, &te).unwrap();
                assert!(preds
                    .iter()
                    .all(|p| p.probs.len() == 1 && (0.0..=1.0).contains(&p.probs[0])));
                let gates = gate_means(&out.checkpoint, &te).unwrap();
                let has_gate = modality != Modality::TxtOnly && ts_embed == TsEmbed::Utde;
                assert_eq!(gates.is_some(), has_gate, "{modality} {ts_embed}");
            }
        }
    }
}

fn multilabel_split(n: usize, seed: u64) -> Vec<Episode> {
    let mut out = synth(SynthTask::XorFusion, n, seed);
    let lat = generate_with_latents(&SynthConfig {
        n_episodes: n,
        d_m: 4,
        d_t: 8,
        alpha_hours: 24.0,
        sparsity: 0.3,
        task: SynthTask::XorFusion,
        seed,
    })
    .unwrap();
    for (e, (_, l)) in out.iter_mut().zip(&lat) {
        e.label = vec![u8::from(l.ts_bit), u8::from(l.note_bit), e.label[0]];
    }
    out
}

#[test]
fn multilabel_task_end_to_end() {
    let cfg = RunConfig {
        epochs: 1,
        ..small(Modality::Fused, TsEmbed::Utde, 9)
    };
    let mut cfg = cfg;
    cfg.set("task", "multilabel:3").unwrap();
    let (tr, va, te) = (
        multilabel_split(60, 1),
        multilabel_split(30, 2),
        multilabel_split(30, 3),
    );
    let out = train(&cfg, &tr, &va).unwrap();
    assert_eq!(out.checkpoint.metric_name, "macro_f1");
    let report = evaluate(&out.checkpoint, &te).unwrap();
    assert_eq!(report.per_class.as_ref().map(Vec::len), Some(3));
    let preds = predict(&out.checkpoint, &te).unwrap();
    assert!(preds.iter().all(|p| p.probs.len() == 3));

    // binary checkpoint on multi-label data is a schema error
    let bin = train(
        &small(Modality::Fused, TsEmbed::Utde, 9),
        &synth(SynthTask::XorFusion, 30, 1),
        &synth(SynthTask::XorFusion, 20, 2),
    )
    .unwrap();
    assert!(matches!(evaluate(&bin.checkpoint, &te), Err(Error::Data(_))));
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let eps = synth(SynthTask::TsOnly, 25, 12);
    save_episodes(&path, &eps).unwrap();
    let schema = TaskSchema {
        d_m: 4,
        n_labels: 1,
        d_t: Some(8),
    };
    let back = load_episodes(&path, &schema).unwrap();
    assert_eq!(back, eps);
    let cfg = small(Modality::Fused, TsEmbed::Utde, 1);
    let (a, sa) = preprocess(&eps, None, &cfg).unwrap();
    let (b, sb) = preprocess(&back, None, &cfg).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.imputed, y.imputed);
        assert_eq!(x.note_emb, y.note_emb);
    }
}

#[test]
fn text_notes_are_encoded_and_late_events_dropped() {
    let e = Episode {
        id: "txt".into(),
        observations: vec![
            TsObservation {
                feature: 1,
                time: 2.0,
                value: 5.0,
            },
            TsObservation {
                feature: 1,
                time: 30.0,
                value: 500.0,
            },
        ],
        notes: vec![
            NoteEvent {
                time: 1.0,
                payload: NotePayload::Text("patient stable overnight".into()),
            },
            NoteEvent {
                time: 40.0,
                payload: NotePayload::Text("late".into()),
            },
        ],
        label: vec![1],
    };
    let cfg = small(Modality::Fused, TsEmbed::Utde, 1);
    let (p, stats) = preprocess(&[e], None, &cfg).unwrap();
    assert_eq!(p[0].note_times.len(), 1);
    assert_eq!(p[0].note_emb.shape(), &[1, 8]);
    assert!(p[0].note_emb.data().iter().any(|&v| v != 0.0));
    assert_eq!(stats.max[1], 5.0);
}

#[test]
fn missing_seed_is_a_config_error() {
    let (tr, va, _) = splits(SynthTask::TsOnly, 1, (10, 10, 1));
    let cfg = RunConfig {
        seed: None,
        ..small(Modality::TsOnly, TsEmbed::Utde, 1)
    };
    assert!(matches!(train(&cfg, &tr, &va), Err(Error::Config(_))));
}

#[test]
fn zero_epochs_keeps_the_initialisation() {
    let (tr, va, _) = splits(SynthTask::TsOnly, 3, (30, 20, 1));
    let cfg = RunConfig {
        epochs: 0,
        ..small(Modality::Fused, TsEmbed::Utde, 8)
    };
    let out = train(&cfg, &tr, &va).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.checkpoint.epoch, 0);
    let fresh = Model::new(cfg.model_config(), 8).unwrap();
    assert_eq!(out.checkpoint.params, fresh.params);
    assert_eq!(evaluate(&out.checkpoint, &va).unwrap().f1, out.checkpoint.metric);
}

#[test]
fn predictions_are_the_scores_behind_the_report() {
    let (tr, va, te) = splits(SynthTask::XorFusion, 5, (40, 20, 30));
    let out = train(&small(Modality::Fused, TsEmbed::Utde, 4), &tr, &va).unwrap();
    let preds = predict(&out.checkpoint, &te).unwrap();
    let scores: Vec<f64> = preds.iter().map(|p| p.probs[0]).collect();
    let labels: Vec<u8> = te.iter().map(|e| e.label[0]).collect();
    let ids: Vec<&str> = te.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(preds.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ids);
    let report = evaluate(&out.checkpoint, &te).unwrap();
    assert_eq!(report.auroc, ehrfuse_core::metrics::auroc(&scores, &labels).unwrap());
    assert_eq!(report.aupr, ehrfuse_core::metrics::aupr(&scores, &labels).unwrap());
}

#[test]
fn empty_evaluation_set_is_an_error() {
    let (tr, va, _) = splits(SynthTask::TsOnly, 3, (20, 10, 1));
    let out = train(&small(Modality::TsOnly, TsEmbed::Imputation, 1), &tr, &va).unwrap();
    assert!(evaluate(&out.checkpoint, &[]).is_err());
    assert!(predict(&out.checkpoint, &[]).is_err());
}

#[test]
fn best_metric_never_decreases() {
    let (tr, va, _) = splits(SynthTask::TsOnly, 8, (150, 50, 1));
    let cfg = RunConfig {
        epochs: 5,
        lr: 2e-3,
        ..small(Modality::TsOnly, TsEmbed::Utde, 6)
    };
    let out = train(&cfg, &tr, &va).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].best_metric >= w[0].best_metric);
    }
    let best = out
        .history
        .iter()
        .map(|r| r.val_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.metric, best);
    assert_eq!(out.history[out.checkpoint.epoch].val_metric, best);
}
