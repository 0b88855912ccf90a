//! Named parameter storage and the small layer building blocks shared by
//! every model component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Uniform(f64, f64),
    /// Glorot uniform, `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
}

/// 64-bit FNV-1a; stable across toolchains, unlike `DefaultHasher`.
pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Flat, ordered parameter store. Every entry is initialised from its own
/// RNG stream keyed by `(seed, name)`, so two models that share a parameter
/// name start from the same values no matter what else they contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name.as_bytes()));
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
        };
        self.names.push(name.to_string());
        self.values
            .push(Tensor::new(shape.to_vec(), data).expect("parameter shape"));
        ParamId(self.values.len() - 1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// One gradient per parameter, zero for parameters the loss never touched.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| grads.bound(i).cloned().unwrap_or_else(|| Tensor::zeros_like(v)))
            .collect()
    }

    /// Adds this pass's gradients into `acc` (same layout as `values`).
    pub fn accumulate_grads(&self, grads: &Gradients, acc: &mut [Tensor]) {
        for (i, a) in acc.iter_mut().enumerate() {
            if let Some(g) = grads.bound(i) {
                a.add_assign(g);
            }
        }
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// A forward pass: the tape being recorded plus the parameter values.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

impl<'a> Scope<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Self { tape, store }
    }

    pub fn param(&self, id: ParamId) -> Var<'a> {
        let store = self.store;
        let v = self.tape.bound_leaf(id.0, || store.get(id).clone());
        debug_assert_eq!(
            v.shape(),
            store.get(id).shape(),
            "one tape bound to two parameter stores"
        );
        v
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.tape.constant(t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = store.add(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
        );
        let bias = bias.then(|| store.add(&format!("{name}.b"), &[d_out], Init::Const(0.0)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'a>(&self, s: Scope<'a>, x: Var<'a>) -> Result<Var<'a>, TensorError> {
        let y = x.matmul(s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(s.param(b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), &[d], Init::Const(1.0)),
            bias: store.add(&format!("{name}.bias"), &[d], Init::Const(0.0)),
        }
    }

    pub fn forward<'a>(&self, s: Scope<'a>, x: Var<'a>) -> Result<Var<'a>, TensorError> {
        x.layer_norm(s.param(self.gain), s.param(self.bias))
    }
}
