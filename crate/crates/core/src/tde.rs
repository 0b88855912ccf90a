//! Hand-crafted temporal discretisation: bin observations onto the reference
//! grid, forward-fill, and embed with a causal convolution.

use crate::data::{Episode, NormalizationStats};
use crate::error::{DataError, TensorError};
use crate::nn::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Tensor, Var};

/// Slack on bin boundaries so `h / H * α` landing one ulp under an integer
/// still goes to the later bin.
const BIN_EPS: f64 = 1e-9;

/// Regular query points `[0, 1/α, …, (α-1)/α]` in normalised time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    points: Vec<f64>,
}

impl ReferenceGrid {
    pub fn new(alpha: usize) -> Self {
        assert!(alpha >= 1, "grid needs at least one point");
        Self {
            points: (0..alpha).map(|i| i as f64 / alpha as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Bin of a normalised time: `[b/α, (b+1)/α)` belongs to `b`.
    pub fn bin(&self, t: f64) -> usize {
        let alpha = self.points.len();
        (((t * alpha as f64) + BIN_EPS).floor() as usize).min(alpha - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedSeries {
    /// `α × d_m`; unobserved cells hold 0 until imputed.
    pub values: Tensor,
    /// Row-major `α × d_m`; true where the cell came from a real observation.
    pub observed: Vec<bool>,
}

impl DiscretizedSeries {
    pub fn is_observed(&self, bin: usize, feature: usize) -> bool {
        self.observed[bin * self.values.cols() + feature]
    }
}

/// Puts each feature's latest observation per bin onto the grid. Equal
/// timestamps resolve to the later entry in the observation list.
pub fn discretize(episode: &Episode, grid: &ReferenceGrid, d_m: usize) -> Result<DiscretizedSeries, DataError> {
    let alpha = grid.len();
    let mut values = Tensor::zeros(&[alpha, d_m]);
    let mut observed = vec![false; alpha * d_m];
    let mut latest = vec![f64::NEG_INFINITY; alpha * d_m];
    for o in &episode.observations {
        if !(0.0..1.0).contains(&o.time) {
            return Err(DataError::Window(format!(
                "episode {}: normalised time {} outside [0, 1)",
                episode.id, o.time
            )));
        }
        let cell = grid.bin(o.time) * d_m + o.feature;
        if o.time >= latest[cell] {
            latest[cell] = o.time;
            observed[cell] = true;
            values.data_mut()[cell] = o.value;
        }
    }
    Ok(DiscretizedSeries { values, observed })
}

/// Forward fill per feature; bins before the first observation take the
/// feature's training-set global mean.
pub fn impute(series: &DiscretizedSeries, stats: &NormalizationStats) -> Tensor {
    let (alpha, d_m) = (series.values.rows(), series.values.cols());
    let mut out = series.values.clone();
    for j in 0..d_m {
        let mut carry = stats.global_mean[j];
        for b in 0..alpha {
            if series.is_observed(b, j) {
                carry = series.values.get(b, j);
            } else {
                out.set(b, j, carry);
            }
        }
    }
    out
}

/// Causal 1-D convolution `α × d_m → α × d_h` with stride 1.
#[derive(Debug, Clone)]
pub struct CausalConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub kernel_size: usize,
}

impl CausalConv {
    pub fn new(store: &mut ParamStore, name: &str, kernel_size: usize, d_in: usize, d_out: usize) -> Self {
        assert!(kernel_size >= 1);
        Self {
            kernel: store.add(
                &format!("{name}.kernel"),
                &[kernel_size, d_in, d_out],
                Init::Xavier {
                    fan_in: kernel_size * d_in,
                    fan_out: d_out,
                },
            ),
            bias: store.add(&format!("{name}.bias"), &[d_out], Init::Const(0.0)),
            kernel_size,
        }
    }

    pub fn forward<'a>(&self, s: Scope<'a>, x: Var<'a>) -> Result<Var<'a>, TensorError> {
        x.causal_conv(s.param(self.kernel), s.param(self.bias))
    }
}

/// Imputation embedding `e_imp` of an already imputed grid.
pub fn conv_embed<'a>(s: Scope<'a>, values: Var<'a>, conv: &CausalConv) -> Result<Var<'a>, TensorError> {
    conv.forward(s, values)
}
