use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Episode, NormalizationStats, NoteEvent, NotePayload, TaskSchema, TsObservation};
use crate::error::DataError;

/// On-disk shape of a note: exactly one of `text` / `emb`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct NoteRecord {
    t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emb: Option<Vec<f64>>,
}

impl TryFrom<NoteRecord> for NoteEvent {
    type Error = String;

    fn try_from(r: NoteRecord) -> Result<Self, String> {
        let payload = match (r.text, r.emb) {
            (Some(text), None) => NotePayload::Text(text),
            (None, Some(emb)) => NotePayload::Embedding(emb),
            _ => return Err("note needs exactly one of `text` or `emb`".into()),
        };
        Ok(NoteEvent { time: r.t, payload })
    }
}

impl From<NoteEvent> for NoteRecord {
    fn from(n: NoteEvent) -> Self {
        let (text, emb) = match n.payload {
            NotePayload::Text(t) => (Some(t), None),
            NotePayload::Embedding(e) => (None, Some(e)),
        };
        NoteRecord { t: n.time, text, emb }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn record_err(line: usize, field: impl Into<String>, msg: impl ToString) -> DataError {
    DataError::Record {
        line,
        field: field.into(),
        msg: msg.to_string(),
    }
}

fn take_field<T: serde::de::DeserializeOwned>(
    obj: &mut serde_json::Map<String, Value>,
    line: usize,
    field: &str,
) -> Result<T, DataError> {
    let v = obj
        .remove(field)
        .ok_or_else(|| record_err(line, field, "missing field"))?;
    serde_json::from_value(v).map_err(|e| record_err(line, field, e))
}

fn parse_record(raw: &str, line: usize, schema: &TaskSchema) -> Result<Episode, DataError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| record_err(line, "<record>", e))?;
    let Value::Object(mut obj) = value else {
        return Err(record_err(line, "<record>", "expected a JSON object"));
    };
    let id: String = take_field(&mut obj, line, "id")?;
    let observations: Vec<TsObservation> = take_field(&mut obj, line, "ts")?;
    let notes: Vec<NoteEvent> = take_field(&mut obj, line, "notes")?;
    let label: Vec<u8> = take_field(&mut obj, line, "y")?;
    if let Some(extra) = obj.keys().next() {
        return Err(record_err(line, extra.clone(), "unknown field"));
    }

    for (i, o) in observations.iter().enumerate() {
        if o.feature >= schema.d_m {
            return Err(record_err(
                line,
                format!("ts[{i}].f"),
                format!("feature {} out of range for d_m = {}", o.feature, schema.d_m),
            ));
        }
        if !o.time.is_finite() || o.time < 0.0 {
            return Err(record_err(line, format!("ts[{i}].t"), "time must be finite and >= 0"));
        }
        if !o.value.is_finite() {
            return Err(record_err(line, format!("ts[{i}].v"), "value must be finite"));
        }
    }
    if notes.is_empty() {
        return Err(record_err(line, "notes", "episode has no notes"));
    }
    for (i, n) in notes.iter().enumerate() {
        if !n.time.is_finite() || n.time < 0.0 {
            return Err(record_err(
                line,
                format!("notes[{i}].t"),
                "time must be finite and >= 0",
            ));
        }
        if let (NotePayload::Embedding(e), Some(d_t)) = (&n.payload, schema.d_t) {
            if e.len() != d_t {
                return Err(record_err(
                    line,
                    format!("notes[{i}].emb"),
                    format!("embedding length {} != d_t = {d_t}", e.len()),
                ));
            }
        }
    }
    if label.len() != schema.n_labels {
        return Err(DataError::Schema(format!(
            "line {line}: label has {} entries, task expects {}",
            label.len(),
            schema.n_labels
        )));
    }
    if label.iter().any(|&y| y > 1) {
        return Err(record_err(line, "y", "labels must be 0 or 1"));
    }

    let mut episode = Episode {
        id,
        observations,
        notes,
        label,
    };
    episode.sort_notes();
    Ok(episode)
}

/// Reads line-delimited episode records. Blank lines are skipped; line
/// numbers in errors are 1-based.
pub fn load_episodes(path: impl AsRef<Path>, schema: &TaskSchema) -> Result<Vec<Episode>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1, schema))
        .collect()
}

pub fn save_episodes(path: impl AsRef<Path>, episodes: &[Episode]) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn save_stats(path: impl AsRef<Path>, stats: &NormalizationStats) -> Result<(), DataError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(stats)?;
    fs::write(path, json).map_err(|e| io_err(path, e))
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<NormalizationStats, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let stats: NormalizationStats = serde_json::from_str(&text)?;
    stats.validate().map_err(DataError::Schema)?;
    Ok(stats)
}
