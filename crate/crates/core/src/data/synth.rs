//! Synthetic irregular multimodal episodes with a known labelling rule.
//!
//! Every feature follows a latent smooth signal: three random sinusoids plus
//! a linear drift over the normalised window `τ ∈ [0, 1]`. Observations are
//! hourly candidates jittered within the hour and kept with probability
//! `sparsity`. The time-series bit is whether feature [`TS_FEATURE`]'s latent
//! mean over the last quarter of the window is positive (the population
//! median, by sign symmetry). The note bit is written as a ±1 offset along
//! embedding axis [`NOTE_DIRECTION`] in every note.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Episode, NoteEvent, NotePayload, TsObservation};
use crate::error::ConfigError;

pub const TS_FEATURE: usize = 0;
pub const NOTE_DIRECTION: usize = 0;
/// Start of the window tail whose mean defines the time-series bit.
pub const TAIL_START: f64 = 0.75;

const SINE_AMPLITUDE: f64 = 0.5;
const CYCLES: (f64, f64) = (0.25, 1.5);
const DRIFT_SD: f64 = 1.5;
const OBS_NOISE: f64 = 0.05;
const NOTE_NOISE: f64 = 0.3;
const NOTE_SIGNAL: f64 = 1.0;
const MAX_NOTES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    TsOnly,
    NotesOnly,
    XorFusion,
}

impl FromStr for SynthTask {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "ts_only" => Ok(Self::TsOnly),
            "notes_only" => Ok(Self::NotesOnly),
            "xor_fusion" => Ok(Self::XorFusion),
            _ => Err(ConfigError(format!(
                "unknown synthetic task {s:?} (ts_only | notes_only | xor_fusion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_episodes: usize,
    pub d_m: usize,
    pub d_t: usize,
    pub alpha_hours: f64,
    pub sparsity: f64,
    pub task: SynthTask,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_episodes == 0 {
            return Err(ConfigError("n_episodes must be >= 1".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(ConfigError("sparsity must be in (0, 1]".into()));
        }
        if self.d_m == 0 || self.d_t == 0 {
            return Err(ConfigError("d_m and d_t must be >= 1".into()));
        }
        if !(self.alpha_hours > 0.0) {
            return Err(ConfigError("alpha_hours must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ aᵢ sin(2π kᵢ τ + pᵢ) + drift · (τ − ½)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSignal {
    /// `(amplitude, cycles per window, phase)`
    pub components: [(f64, f64, f64); 3],
    pub drift: f64,
}

impl LatentSignal {
    pub fn at(&self, tau: f64) -> f64 {
        self.components
            .iter()
            .map(|&(a, k, p)| a * (TAU * k * tau + p).sin())
            .sum::<f64>()
            + self.drift * (tau - 0.5)
    }

    /// Exact mean of the signal over `[TAIL_START, 1]`.
    pub fn tail_mean(&self) -> f64 {
        let width = 1.0 - TAIL_START;
        let sines: f64 = self
            .components
            .iter()
            .map(|&(a, k, p)| {
                let w = TAU * k;
                a * ((w * TAIL_START + p).cos() - (w + p).cos()) / (w * width)
            })
            .sum();
        sines + self.drift * ((1.0 + TAIL_START) / 2.0 - 0.5)
    }

    pub fn ts_bit(&self) -> bool {
        self.tail_mean() > 0.0
    }
}

/// Generator internals for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// Latent signal of [`TS_FEATURE`].
    pub signal: LatentSignal,
    pub ts_bit: bool,
    pub note_bit: bool,
}

pub fn label_for(task: SynthTask, ts_bit: bool, note_bit: bool) -> u8 {
    u8::from(match task {
        SynthTask::TsOnly => ts_bit,
        SynthTask::NotesOnly => note_bit,
        SynthTask::XorFusion => ts_bit ^ note_bit,
    })
}

/// Raw-unit offset and scale of feature `j`; fixed so independently
/// generated splits share units.
pub fn feature_units(j: usize) -> (f64, f64) {
    (10.0 * (j + 1) as f64, 1.0 + j as f64)
}

fn sample_signal(rng: &mut ChaCha8Rng, amp: &Normal<f64>, drift: &Normal<f64>) -> LatentSignal {
    let mut comp = [(0.0, 0.0, 0.0); 3];
    for c in &mut comp {
        *c = (
            amp.sample(rng),
            rng.random_range(CYCLES.0..CYCLES.1),
            rng.random_range(0.0..TAU),
        );
    }
    LatentSignal {
        components: comp,
        drift: drift.sample(rng),
    }
}

pub fn generate_with_latents(cfg: &SynthConfig) -> Result<Vec<(Episode, Latents)>, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let amp = Normal::new(0.0, SINE_AMPLITUDE).expect("valid sd");
    let drift = Normal::new(0.0, DRIFT_SD).expect("valid sd");
    let unit = Normal::new(0.0, 1.0).expect("valid sd");
    let hours = cfg.alpha_hours.ceil() as usize;

    let mut out = Vec::with_capacity(cfg.n_episodes);
    for i in 0..cfg.n_episodes {
        let mut observations = Vec::new();
        let mut designated = None;
        for j in 0..cfg.d_m {
            let signal = sample_signal(&mut rng, &amp, &drift);
            let (offset, scale) = feature_units(j);
            for h in 0..hours {
                let t = h as f64 + rng.random::<f64>();
                let keep = rng.random::<f64>() < cfg.sparsity;
                if !keep || t >= cfg.alpha_hours {
                    continue;
                }
                let latent = signal.at(t / cfg.alpha_hours);
                observations.push(TsObservation {
                    feature: j,
                    time: t,
                    value: offset + scale * (latent + OBS_NOISE * unit.sample(&mut rng)),
                });
            }
            if j == TS_FEATURE {
                designated = Some(signal);
            }
        }
        let signal = designated.expect("d_m >= 1");
        let ts_bit = signal.ts_bit();
        let note_bit = rng.random::<bool>();
        let sign = if note_bit { 1.0 } else { -1.0 };

        let n_notes = rng.random_range(1..=MAX_NOTES);
        let mut notes: Vec<NoteEvent> = (0..n_notes)
            .map(|_| {
                let time = rng.random_range(0.0..cfg.alpha_hours);
                let mut emb: Vec<f64> = (0..cfg.d_t).map(|_| NOTE_NOISE * unit.sample(&mut rng)).collect();
                emb[NOTE_DIRECTION] += sign * NOTE_SIGNAL;
                NoteEvent {
                    time,
                    payload: NotePayload::Embedding(emb),
                }
            })
            .collect();
        notes.sort_by(|a, b| a.time.total_cmp(&b.time));

        let episode = Episode {
            id: format!("syn-{}-{i}", cfg.seed),
            observations,
            notes,
            label: vec![label_for(cfg.task, ts_bit, note_bit)],
        };
        out.push((
            episode,
            Latents {
                signal,
                ts_bit,
                note_bit,
            },
        ));
    }
    Ok(out)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Episode>, ConfigError> {
    Ok(generate_with_latents(cfg)?.into_iter().map(|(e, _)| e).collect())
}
