//! Episodes: one patient window of irregular numeric observations, timestamped
//! notes and a label vector.

mod io;
mod normalize;
pub mod synth;
mod text;

pub use io::{load_episodes, load_stats, save_episodes, save_stats};
pub use normalize::{compute_stats, normalize, window, NormalizationStats};
pub use synth::{generate_synthetic, generate_with_latents, SynthConfig, SynthTask};
pub use text::toy_text_encode;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsObservation {
    #[serde(rename = "f")]
    pub feature: usize,
    /// Hours since admission on disk; normalised to `[0, 1)` after [`normalize`].
    #[serde(rename = "t")]
    pub time: f64,
    #[serde(rename = "v")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NotePayload {
    Text(String),
    Embedding(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "io::NoteRecord", into = "io::NoteRecord")]
pub struct NoteEvent {
    pub time: f64,
    pub payload: NotePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    #[serde(rename = "ts")]
    pub observations: Vec<TsObservation>,
    pub notes: Vec<NoteEvent>,
    #[serde(rename = "y")]
    pub label: Vec<u8>,
}

/// What a dataset file must look like to be usable for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSchema {
    pub d_m: usize,
    pub n_labels: usize,
    /// Required embedding length when notes carry precomputed embeddings.
    pub d_t: Option<usize>,
}

impl Episode {
    pub fn sort_notes(&mut self) {
        self.notes.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
}

/// Keeps the `k` latest notes by time. Notes with equal times keep their
/// relative order, so at a tie on the cut the later list entries survive.
pub fn truncate_notes(mut episode: Episode, k: usize) -> Episode {
    assert!(k >= 1, "must keep at least one note");
    episode.sort_notes();
    let n = episode.notes.len();
    if n > k {
        episode.notes.drain(..n - k);
    }
    episode
}
