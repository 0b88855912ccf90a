//! End-to-end model assembly: numeric-series embedding (UTDE or one of its
//! branches), note-series embedding, fusion or single-stream encoder, and the
//! classifier.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{toy_text_encode, Episode, NormalizationStats, NotePayload};
use crate::error::{ConfigError, DataError, TensorError};
use crate::fusion::{classify, fusion_stack, single_stack, Classifier, FusionStack, SingleStack};
use crate::mtand::{mtand_ts, mtand_txt, Mtand, ObservationSet, Time2VecBank};
use crate::nn::{LayerNorm, Linear, ParamStore, Scope};
use crate::tde::{conv_embed, discretize, impute, CausalConv, ReferenceGrid};
use crate::tensor::{Tensor, Var};
use crate::utde::{gate, utde_embed, Gate, GateLevel};

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl FromStr for $name {
            type Err = ConfigError;

            fn from_str(s: &str) -> Result<Self, ConfigError> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(ConfigError(format!(
                        concat!("unknown ", stringify!($name), " {:?} (expected one of: ", $($text, " "),+, ")"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }
    };
}

keyword_enum!(TsEmbed {
    Utde => "utde",
    Imputation => "imputation",
    Mtand => "mtand",
});

keyword_enum!(Modality {
    Fused => "fused",
    TsOnly => "ts",
    TxtOnly => "txt",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_m: usize,
    pub d_t: usize,
    /// Grid points `α`.
    pub alpha: usize,
    pub d_hidden: usize,
    /// Time2Vec width `d_v`.
    pub d_timeembed: usize,
    /// Number of Time2Vec encoders / interpolation heads `V`.
    pub n_time_embeds: usize,
    /// Layers `J` of the fusion stack or single-stream encoder.
    pub fusion_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub n_outputs: usize,
    pub gate_level: GateLevel,
    pub ts_embed: TsEmbed,
    pub modality: Modality,
    /// When false, notes skip time interpolation and enter the encoder as a
    /// projected sequence of raw embeddings.
    pub text_irregularity: bool,
    /// Replaces the learned UTDE gate with a constant.
    pub gate_override: Option<f64>,
    /// Hash seed of the bag-of-words encoder for text notes.
    pub text_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("d_m", self.d_m),
            ("d_t", self.d_t),
            ("alpha", self.alpha),
            ("d_hidden", self.d_hidden),
            ("n_time_embeds", self.n_time_embeds),
            ("fusion_layers", self.fusion_layers),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("n_outputs", self.n_outputs),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(ConfigError(format!("{k} must be >= 1")));
            }
        }
        if self.d_timeembed < 2 {
            return Err(ConfigError("d_timeembed must be >= 2".into()));
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return Err(ConfigError(format!(
                "heads ({}) must divide d_hidden ({})",
                self.heads, self.d_hidden
            )));
        }
        if let Some(g) = self.gate_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(ConfigError("gate_override must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    fn uses_ts(&self) -> bool {
        self.modality != Modality::TxtOnly
    }

    fn uses_txt(&self) -> bool {
        self.modality != Modality::TsOnly
    }
}

/// Model-ready view of a normalised episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEpisode {
    pub id: String,
    /// Forward-filled `α × d_m` grid.
    pub imputed: Tensor,
    pub observations: ObservationSet,
    pub note_times: Vec<f64>,
    /// `l × d_t`, one row per note.
    pub note_emb: Tensor,
    pub label: Vec<f64>,
}

/// Discretises, imputes and encodes a normalised episode.
pub fn prepare(
    episode: &Episode,
    stats: &NormalizationStats,
    config: &ModelConfig,
) -> Result<PreparedEpisode, DataError> {
    let grid = ReferenceGrid::new(config.alpha);
    let imputed = impute(&discretize(episode, &grid, config.d_m)?, stats);
    let observations = ObservationSet::from_episode(episode);
    let empty = observations.features_without_observations(config.d_m);
    if empty > 0 {
        log::debug!("episode {}: {empty} feature(s) without observations", episode.id);
    }
    if episode.notes.is_empty() {
        return Err(DataError::Window(format!("episode {} has no notes", episode.id)));
    }
    let mut emb = Vec::with_capacity(episode.notes.len() * config.d_t);
    for n in &episode.notes {
        match &n.payload {
            NotePayload::Text(t) => emb.extend(toy_text_encode(t, config.d_t, config.text_seed)),
            NotePayload::Embedding(e) if e.len() == config.d_t => emb.extend_from_slice(e),
            NotePayload::Embedding(e) => {
                return Err(DataError::Schema(format!(
                    "episode {}: note embedding of length {} (d_t = {})",
                    episode.id,
                    e.len(),
                    config.d_t
                )))
            }
        }
    }
    let note_emb = Tensor::matrix(episode.notes.len(), config.d_t, emb).expect("row lengths checked");
    Ok(PreparedEpisode {
        id: episode.id.clone(),
        imputed,
        observations,
        note_times: episode.notes.iter().map(|n| n.time).collect(),
        note_emb,
        label: episode.label.iter().map(|&y| f64::from(y)).collect(),
    })
}

/// Parameter handles of every submodule the configuration enables.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub grid: ReferenceGrid,
    pub conv: Option<CausalConv>,
    pub bank: Option<Rc<Time2VecBank>>,
    pub mtand_ts: Option<Mtand>,
    pub gate: Option<Gate>,
    pub mtand_txt: Option<Mtand>,
    pub txt_proj: Option<Linear>,
    pub fusion: Option<FusionStack>,
    pub encoder: Option<SingleStack>,
    pub ln_ts: Option<LayerNorm>,
    pub ln_txt: Option<LayerNorm>,
    pub classifier: Classifier,
}

/// Numeric-stream intermediates, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct TsStream<'a> {
    pub e_imp: Option<Var<'a>>,
    pub e_attn: Option<Var<'a>>,
    pub gate: Option<Var<'a>>,
    pub z: Var<'a>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let c = &config;
        let d_h = c.d_hidden;
        let mut st = ParamStore::new(seed);
        let ts_branches = |e: TsEmbed| c.uses_ts() && (c.ts_embed == TsEmbed::Utde || c.ts_embed == e);
        let txt_interp = c.uses_txt() && c.text_irregularity;

        let conv =
            ts_branches(TsEmbed::Imputation).then(|| CausalConv::new(&mut st, "imp.conv", c.conv_kernel, c.d_m, d_h));
        let bank = (ts_branches(TsEmbed::Mtand) || txt_interp)
            .then(|| Time2VecBank::new(&mut st, "t2v", c.n_time_embeds, c.d_timeembed));
        let mtand_ts = ts_branches(TsEmbed::Mtand)
            .then(|| Mtand::new(&mut st, "mtand_ts", Rc::clone(bank.as_ref().unwrap()), c.d_m, d_h));
        let gate = (c.uses_ts() && c.ts_embed == TsEmbed::Utde).then(|| Gate::new(&mut st, "gate", c.gate_level, d_h));
        let mtand_txt =
            txt_interp.then(|| Mtand::new(&mut st, "mtand_txt", Rc::clone(bank.as_ref().unwrap()), c.d_t, d_h));
        let txt_proj =
            (c.uses_txt() && !c.text_irregularity).then(|| Linear::new(&mut st, "txt_proj", c.d_t, d_h, true));
        let (fusion, encoder) = match c.modality {
            Modality::Fused => (
                Some(FusionStack::new(&mut st, "fusion", c.fusion_layers, d_h, c.heads)),
                None,
            ),
            _ => (
                None,
                Some(SingleStack::new(&mut st, "enc", c.fusion_layers, d_h, c.heads)),
            ),
        };
        let ln_ts = c.uses_ts().then(|| LayerNorm::new(&mut st, "ln_final_ts", d_h));
        let ln_txt = c.uses_txt().then(|| LayerNorm::new(&mut st, "ln_final_txt", d_h));
        let width = if c.modality == Modality::Fused { 2 * d_h } else { d_h };
        let classifier = Classifier::new(&mut st, "cls", width, d_h, c.n_outputs);

        Ok(Self {
            arch: Architecture {
                grid: ReferenceGrid::new(c.alpha),
                conv,
                bank,
                mtand_ts,
                gate,
                mtand_txt,
                txt_proj,
                fusion,
                encoder,
                ln_ts,
                ln_txt,
                classifier,
            },
            config,
            params: st,
        })
    }

    /// Numeric stream `z_ts` (`α × d_h`) and its branch embeddings.
    pub fn ts_stream<'a>(&self, s: Scope<'a>, ep: &PreparedEpisode) -> Result<TsStream<'a>, TensorError> {
        let a = &self.arch;
        let e_imp = match &a.conv {
            Some(conv) => Some(conv_embed(s, s.constant(ep.imputed.clone()), conv)?),
            None => None,
        };
        let e_attn = match &a.mtand_ts {
            Some(m) => Some(mtand_ts(s, &a.grid, &ep.observations, m)?),
            None => None,
        };
        let out = match (e_imp, e_attn) {
            (Some(i), Some(m)) => {
                let g = match self.config.gate_override {
                    Some(v) => s.constant(Tensor::full(&[1, 1], v)),
                    None => gate(s, i, m, a.gate.as_ref().expect("utde carries a gate"))?,
                };
                TsStream {
                    e_imp,
                    e_attn,
                    gate: Some(g),
                    z: utde_embed(i, m, g)?,
                }
            }
            (Some(z), None) | (None, Some(z)) => TsStream {
                e_imp,
                e_attn,
                gate: None,
                z,
            },
            (None, None) => return Err(TensorError::Invalid("model has no numeric stream".into())),
        };
        Ok(out)
    }

    /// Note stream: `α × d_h` after interpolation, or `l × d_h` when note
    /// timing is ignored.
    pub fn txt_stream<'a>(&self, s: Scope<'a>, ep: &PreparedEpisode) -> Result<Var<'a>, TensorError> {
        let a = &self.arch;
        match (&a.mtand_txt, &a.txt_proj) {
            (Some(m), _) => mtand_txt(s, &a.grid, &ep.note_times, &ep.note_emb, m),
            (None, Some(p)) => p.forward(s, s.constant(ep.note_emb.clone())),
            (None, None) => Err(TensorError::Invalid("model has no note stream".into())),
        }
    }

    /// `1 × n_outputs` logits.
    pub fn forward<'a>(&self, s: Scope<'a>, ep: &PreparedEpisode) -> Result<Var<'a>, TensorError> {
        let a = &self.arch;
        let streams = match self.config.modality {
            Modality::Fused => {
                let z_ts = self.ts_stream(s, ep)?.z;
                let z_txt = self.txt_stream(s, ep)?;
                let (h_ts, h_txt) = fusion_stack(s, z_ts, z_txt, a.fusion.as_ref().unwrap())?;
                vec![
                    a.ln_ts.as_ref().unwrap().forward(s, h_ts)?,
                    a.ln_txt.as_ref().unwrap().forward(s, h_txt)?,
                ]
            }
            Modality::TsOnly => {
                let h = single_stack(s, self.ts_stream(s, ep)?.z, a.encoder.as_ref().unwrap())?;
                vec![a.ln_ts.as_ref().unwrap().forward(s, h)?]
            }
            Modality::TxtOnly => {
                let h = single_stack(s, self.txt_stream(s, ep)?, a.encoder.as_ref().unwrap())?;
                vec![a.ln_txt.as_ref().unwrap().forward(s, h)?]
            }
        };
        classify(s, &streams, &a.classifier)
    }

    /// Mean BCE of one episode.
    pub fn loss<'a>(&self, s: Scope<'a>, ep: &PreparedEpisode, pos_weight: f64) -> Result<Var<'a>, TensorError> {
        self.forward(s, ep)?.bce_with_logits(&ep.label, pos_weight)
    }
}
