//! Gated mixture of the imputation embedding and the mTAND embedding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, TensorError};
use crate::nn::{Linear, ParamId, ParamStore, Scope};
use crate::tensor::Var;

/// Granularity of the mixing coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateLevel {
    /// One scalar per episode.
    Patient,
    /// One coefficient per grid step.
    Temporal,
    /// One coefficient per grid step and hidden unit.
    Hidden,
}

impl FromStr for GateLevel {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "patient" => Ok(Self::Patient),
            "temporal" => Ok(Self::Temporal),
            "hidden" => Ok(Self::Hidden),
            _ => Err(ConfigError(format!(
                "unknown gate level {s:?} (patient | temporal | hidden)"
            ))),
        }
    }
}

impl fmt::Display for GateLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Patient => "patient",
            Self::Temporal => "temporal",
            Self::Hidden => "hidden",
        })
    }
}

/// `sigmoid(head(relu(W[e_imp ⊕ e_attn] + b)))`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub level: GateLevel,
    pub hidden: Linear,
    pub head: Linear,
    pub d_h: usize,
}

impl Gate {
    pub fn new(store: &mut ParamStore, name: &str, level: GateLevel, d_h: usize) -> Self {
        let out = match level {
            GateLevel::Patient | GateLevel::Temporal => 1,
            GateLevel::Hidden => d_h,
        };
        Self {
            level,
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * d_h, d_h, true),
            head: Linear::new(store, &format!("{name}.head"), d_h, out, true),
            d_h,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.head.params());
        p
    }
}

/// Gate values: `1×1` (patient), `α×1` (temporal) or `α×d_h` (hidden).
///
/// The patient level mean-pools the concatenation over time before the MLP;
/// the temporal level applies the MLP row by row to a scalar head.
pub fn gate<'a>(s: Scope<'a>, e_imp: Var<'a>, e_attn: Var<'a>, g: &Gate) -> Result<Var<'a>, TensorError> {
    if e_imp.shape() != e_attn.shape() {
        return Err(TensorError::Shape {
            op: "gate",
            lhs: e_imp.shape(),
            rhs: e_attn.shape(),
        });
    }
    let mut x = Var::concat_cols(&[e_imp, e_attn])?;
    if g.level == GateLevel::Patient {
        x = x.mean_rows();
    }
    let h = g.hidden.forward(s, x)?.relu();
    Ok(g.head.forward(s, h)?.sigmoid())
}

/// `g ⊙ e_imp + (1 − g) ⊙ e_attn` with `g` broadcast to `α × d_h`.
pub fn utde_embed<'a>(e_imp: Var<'a>, e_attn: Var<'a>, g: Var<'a>) -> Result<Var<'a>, TensorError> {
    let g = g.broadcast_to(e_imp.rows(), e_imp.cols())?;
    e_imp.mul(g)?.add(e_attn.mul(g.one_minus())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn gate_value(level: GateLevel, tweak: impl Fn(&mut ParamStore, &Gate)) -> Tensor {
        let mut store = ParamStore::new(1);
        let g = Gate::new(&mut store, "gate", level, 4);
        tweak(&mut store, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let s = Scope::new(&tape, &store);
        let a = s.constant(random(&mut rng, 5, 4));
        let b = s.constant(random(&mut rng, 5, 4));
        gate(s, a, b, &g).unwrap().value()
    }

    #[test]
    fn zero_mlp_gives_half() {
        for level in [GateLevel::Patient, GateLevel::Temporal, GateLevel::Hidden] {
            let g = gate_value(level, |st, g| {
                for p in g.params() {
                    st.get_mut(p).data_mut().fill(0.0);
                }
            });
            assert!(g.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn large_bias_saturates() {
        let g = gate_value(GateLevel::Temporal, |st, g| {
            st.get_mut(g.head.bias.unwrap()).data_mut().fill(30.0);
            st.get_mut(g.head.weight).data_mut().fill(0.0);
        });
        assert!(g.data().iter().all(|&v| (1.0 - v) < 1e-9));
    }

    #[test]
    fn output_shape_per_level() {
        assert_eq!(gate_value(GateLevel::Patient, |_, _| {}).shape(), &[1, 1]);
        assert_eq!(gate_value(GateLevel::Temporal, |_, _| {}).shape(), &[5, 1]);
        let h = gate_value(GateLevel::Hidden, |_, _| {});
        assert_eq!(h.shape(), &[5, 4]);
        assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn embed_extremes_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let a = tape.constant(random(&mut rng, 3, 2));
        let b = tape.constant(random(&mut rng, 3, 2));
        let one = tape.constant(Tensor::full(&[1, 1], 1.0));
        let zero = tape.constant(Tensor::full(&[3, 1], 0.0));
        assert_eq!(utde_embed(a, b, one).unwrap().value(), a.value());
        assert_eq!(utde_embed(a, b, zero).unwrap().value(), b.value());
        let neg = tape.constant(a.value().map(|v| -v));
        let half = tape.constant(Tensor::full(&[3, 2], 0.5));
        assert!(utde_embed(a, neg, half)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn patient_gate_is_uniform_across_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let a = tape.constant(random(&mut rng, 3, 2));
        let b = tape.constant(random(&mut rng, 3, 2));
        let g = tape.constant(Tensor::full(&[1, 1], 0.3));
        let z = utde_embed(a, b, g).unwrap().value();
        for i in 0..6 {
            let expect = 0.3 * a.value().data()[i] + 0.7 * b.value().data()[i];
            assert!((z.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn level_parses_and_displays() {
        for s in ["patient", "temporal", "hidden"] {
            assert_eq!(s.parse::<GateLevel>().unwrap().to_string(), s);
        }
        assert!("global".parse::<GateLevel>().is_err());
    }
}
