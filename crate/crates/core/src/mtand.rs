//! Multi-time attention: Time2Vec embeddings of the reference grid attend to
//! Time2Vec embeddings of observation times, and the attention weights
//! interpolate the observed values onto the grid.

use std::f64::consts::TAU;
use std::rc::Rc;

use crate::error::TensorError;
use crate::nn::{Init, Linear, ParamId, ParamStore, Scope};
use crate::tde::ReferenceGrid;
use crate::tensor::{Tensor, Var};

/// Learned time encoding: dimension 0 is `ω₀τ + φ₀`, the rest are
/// `sin(ωᵢτ + φᵢ)`.
#[derive(Debug, Clone)]
pub struct Time2Vec {
    pub omega: ParamId,
    pub phi: ParamId,
    pub d_v: usize,
}

impl Time2Vec {
    /// Periodic frequencies cover 1–10 cycles over the normalised window;
    /// the linear frequency starts at 1.
    pub fn new(store: &mut ParamStore, name: &str, d_v: usize) -> Self {
        assert!(
            d_v >= 2,
            "time2vec needs one linear and at least one periodic dimension"
        );
        let omega = store.add(&format!("{name}.omega"), &[d_v], Init::Uniform(TAU, 10.0 * TAU));
        store.get_mut(omega).data_mut()[0] = 1.0;
        let phi = store.add(&format!("{name}.phi"), &[d_v], Init::Uniform(0.0, TAU));
        Self { omega, phi, d_v }
    }

    /// `len(times) × d_v` embedding.
    pub fn forward<'a>(&self, s: Scope<'a>, times: &[f64]) -> Result<Var<'a>, TensorError> {
        let tau = s.constant(Tensor::matrix(times.len(), 1, times.to_vec())?);
        Ok(tau
            .matmul(s.param(self.omega))?
            .add_bias(s.param(self.phi))?
            .time2vec_activation())
    }
}

/// `V` Time2Vec encoders. One bank is shared by the numeric and the note
/// interpolators; holders keep an `Rc` to the same bank.
#[derive(Debug)]
pub struct Time2VecBank {
    pub encoders: Vec<Time2Vec>,
}

impl Time2VecBank {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, d_v: usize) -> Rc<Self> {
        assert!(n >= 1);
        Rc::new(Self {
            encoders: (0..n)
                .map(|v| Time2Vec::new(store, &format!("{name}.v{v}"), d_v))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoders.is_empty()
    }

    pub fn d_v(&self) -> usize {
        self.encoders[0].d_v
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.encoders.iter().flat_map(|e| [e.omega, e.phi]).collect()
    }
}

/// Query/key projections of one attention head.
#[derive(Debug, Clone)]
pub struct TimeHead {
    pub w_query: ParamId,
    pub w_key: ParamId,
}

/// One interpolation module (numeric or note variant). Heads, projections and
/// output layer are private to the module; the Time2Vec bank is shared.
#[derive(Debug, Clone)]
pub struct Mtand {
    pub bank: Rc<Time2VecBank>,
    pub heads: Vec<TimeHead>,
    pub proj: Linear,
    pub d_in: usize,
}

impl Mtand {
    pub fn new(store: &mut ParamStore, name: &str, bank: Rc<Time2VecBank>, d_in: usize, d_h: usize) -> Self {
        let d_v = bank.d_v();
        let xavier = Init::Xavier {
            fan_in: d_v,
            fan_out: d_v,
        };
        let heads = (0..bank.len())
            .map(|v| TimeHead {
                w_query: store.add(&format!("{name}.v{v}.wq"), &[d_v, d_v], xavier),
                w_key: store.add(&format!("{name}.v{v}.wk"), &[d_v, d_v], xavier),
            })
            .collect();
        let proj = Linear::new(store, &format!("{name}.proj"), bank.len() * d_in, d_h, true);
        Self {
            bank,
            heads,
            proj,
            d_in,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Scaled scores `⟨θ(α)W^q, θ(keys)W^k⟩ / √d_v`, shape `α × l`.
    fn scores<'a>(
        &self,
        s: Scope<'a>,
        grid: &ReferenceGrid,
        key_times: &[f64],
        head: usize,
    ) -> Result<Var<'a>, TensorError> {
        let t2v = &self.bank.encoders[head];
        let h = &self.heads[head];
        let q = t2v.forward(s, grid.points())?.matmul(s.param(h.w_query))?;
        let k = t2v.forward(s, key_times)?.matmul(s.param(h.w_key))?;
        Ok(q.matmul(k.transpose())?.scale(1.0 / (t2v.d_v as f64).sqrt()))
    }

    /// Single-series attention for head `head`: grid times query `key_times`,
    /// `values` (`l × c`, row-major) are interpolated to `α × c`. With no keys
    /// the output is all zeros.
    pub fn time_attention<'a>(
        &self,
        s: Scope<'a>,
        grid: &ReferenceGrid,
        key_times: &[f64],
        values: &[f64],
        c: usize,
        head: usize,
    ) -> Result<Var<'a>, TensorError> {
        if key_times.is_empty() {
            return Ok(s.constant(Tensor::zeros(&[grid.len(), c])));
        }
        let v = s.constant(Tensor::matrix(key_times.len(), c, values.to_vec())?);
        let (w, _) = self.scores(s, grid, key_times, head)?.masked_softmax(None)?;
        w.matmul(v)
    }

    /// Per-head interpolation of a numeric series, concatenated across heads:
    /// `α × (V·d_m)`. Each feature attends only over its own observations
    /// (grouped softmax); features without observations give zero columns.
    pub fn interpolate_ts<'a>(
        &self,
        s: Scope<'a>,
        grid: &ReferenceGrid,
        obs: &ObservationSet,
    ) -> Result<Var<'a>, TensorError> {
        let d_m = self.d_in;
        let alpha = grid.len();
        let mut parts = Vec::with_capacity(self.n_heads());
        if obs.is_empty() {
            let zeros = s.constant(Tensor::zeros(&[alpha, d_m * self.n_heads()]));
            return Ok(zeros);
        }
        let scatter = s.constant(obs.scatter_matrix(d_m));
        for v in 0..self.n_heads() {
            let w = self
                .scores(s, grid, &obs.times, v)?
                .group_softmax(obs.features.clone(), d_m)?;
            parts.push(w.matmul(scatter)?);
        }
        Var::concat_cols(&parts)
    }

    /// Note-series interpolation before projection: `α × (V·d_t)`. All
    /// embedding dimensions share the note times as keys.
    pub fn interpolate_notes<'a>(
        &self,
        s: Scope<'a>,
        grid: &ReferenceGrid,
        note_times: &[f64],
        note_emb: &Tensor,
    ) -> Result<Var<'a>, TensorError> {
        let parts = (0..self.n_heads())
            .map(|v| self.time_attention(s, grid, note_times, note_emb.data(), note_emb.cols(), v))
            .collect::<Result<Vec<_>, _>>()?;
        Var::concat_cols(&parts)
    }
}

/// Irregular observations of one episode, flattened across features.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub times: Vec<f64>,
    pub features: Rc<[usize]>,
    pub values: Vec<f64>,
}

impl ObservationSet {
    pub fn from_episode(e: &crate::data::Episode) -> Self {
        Self {
            times: e.observations.iter().map(|o| o.time).collect(),
            features: e.observations.iter().map(|o| o.feature).collect(),
            values: e.observations.iter().map(|o| o.value).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `l × d_m` with each observation's value in its feature column.
    fn scatter_matrix(&self, d_m: usize) -> Tensor {
        let mut m = Tensor::zeros(&[self.len(), d_m]);
        for (k, (&f, &v)) in self.features.iter().zip(&self.values).enumerate() {
            m.set(k, f, v);
        }
        m
    }

    pub fn features_without_observations(&self, d_m: usize) -> usize {
        let mut seen = vec![false; d_m];
        for &f in self.features.iter() {
            seen[f] = true;
        }
        seen.iter().filter(|s| !**s).count()
    }
}

/// `e_attn`: numeric-series interpolation projected to `α × d_h`.
pub fn mtand_ts<'a>(
    s: Scope<'a>,
    grid: &ReferenceGrid,
    obs: &ObservationSet,
    m: &Mtand,
) -> Result<Var<'a>, TensorError> {
    let cat = m.interpolate_ts(s, grid, obs)?;
    m.proj.forward(s, cat)
}

/// `z_txt`: note-embedding interpolation projected to `α × d_h`.
pub fn mtand_txt<'a>(
    s: Scope<'a>,
    grid: &ReferenceGrid,
    note_times: &[f64],
    note_emb: &Tensor,
    m: &Mtand,
) -> Result<Var<'a>, TensorError> {
    assert!(!note_times.is_empty(), "episodes carry at least one note");
    let cat = m.interpolate_notes(s, grid, note_times, note_emb)?;
    m.proj.forward(s, cat)
}
