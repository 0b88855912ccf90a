//! Interleaved self/cross attention over the two grid-aligned streams.

use crate::error::TensorError;
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore, Scope};
use crate::tensor::Var;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_h: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d_h.is_multiple_of(heads), "heads must divide d_h");
        Self {
            query: Linear::new(store, &format!("{name}.q"), d_h, d_h, true),
            key: Linear::new(store, &format!("{name}.k"), d_h, d_h, true),
            value: Linear::new(store, &format!("{name}.v"), d_h, d_h, true),
            output: Linear::new(store, &format!("{name}.o"), d_h, d_h, true),
            heads,
        }
    }

    /// Unmasked scaled dot-product attention from `x` (queries) to `ctx`
    /// (keys and values), without residual.
    pub fn forward<'a>(&self, s: Scope<'a>, x: Var<'a>, ctx: Var<'a>) -> Result<Var<'a>, TensorError> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, ctx)?;
        let v = self.value.forward(s, ctx)?;
        let d = q.cols() / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut parts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.slice_cols(h * d, d)?,
                k.slice_cols(h * d, d)?,
                v.slice_cols(h * d, d)?,
            );
            let w = qh.matmul(kh.transpose())?.scale(scale).softmax();
            parts.push(w.matmul(vh)?);
        }
        let cat = if self.heads == 1 {
            parts[0]
        } else {
            Var::concat_cols(&parts)?
        };
        self.output.forward(s, cat)
    }
}

/// `x + MH(LN(x))`.
pub fn self_attend<'a>(
    s: Scope<'a>,
    x: Var<'a>,
    ln: &LayerNorm,
    mha: &MultiHeadAttention,
) -> Result<Var<'a>, TensorError> {
    let n = ln.forward(s, x)?;
    x.add(mha.forward(s, n, n)?)
}

/// `x + MH(LN(x), LN(other))`: queries from `x`, keys and values from
/// `other`, both normalised by the same sublayer norm.
pub fn cross_attend<'a>(
    s: Scope<'a>,
    x: Var<'a>,
    other: Var<'a>,
    ln: &LayerNorm,
    mha: &MultiHeadAttention,
) -> Result<Var<'a>, TensorError> {
    let nx = ln.forward(s, x)?;
    let no = ln.forward(s, other)?;
    x.add(mha.forward(s, nx, no)?)
}

/// Position-wise `x + W₂ relu(W₁ LN(x))`, inner width `4·d_h`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub ln: LayerNorm,
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_h: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d_h),
            inner: Linear::new(store, &format!("{name}.inner"), d_h, 4 * d_h, true),
            outer: Linear::new(store, &format!("{name}.outer"), 4 * d_h, d_h, true),
        }
    }

    pub fn forward<'a>(&self, s: Scope<'a>, x: Var<'a>) -> Result<Var<'a>, TensorError> {
        let h = self.inner.forward(s, self.ln.forward(s, x)?)?.relu();
        x.add(self.outer.forward(s, h)?)
    }
}

/// Sublayers of one modality within one fusion layer.
#[derive(Debug, Clone)]
pub struct StreamBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: Option<LayerNorm>,
    pub cross_attn: Option<MultiHeadAttention>,
    pub ffn: FeedForward,
}

impl StreamBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_h: usize, heads: usize, cross: bool) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d_h),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d_h, heads),
            ln_cross: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_cross"), d_h)),
            cross_attn: cross.then(|| MultiHeadAttention::new(store, &format!("{name}.cross"), d_h, heads)),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_h),
        }
    }

    /// Output projections of every sublayer; zeroing them makes the block
    /// the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut p = self.self_attn.output.params();
        if let Some(c) = &self.cross_attn {
            p.extend(c.output.params());
        }
        p.extend(self.ffn.outer.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub ts: StreamBlock,
    pub txt: StreamBlock,
}

/// `J` interleaved layers; cross-attention reads the other stream after its
/// self-attention sublayer in the same layer.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub layers: Vec<FusionLayer>,
}

impl FusionStack {
    pub fn new(store: &mut ParamStore, name: &str, j: usize, d_h: usize, heads: usize) -> Self {
        assert!(j >= 1, "fusion needs at least one layer");
        Self {
            layers: (0..j)
                .map(|l| FusionLayer {
                    ts: StreamBlock::new(store, &format!("{name}.l{l}.ts"), d_h, heads, true),
                    txt: StreamBlock::new(store, &format!("{name}.l{l}.txt"), d_h, heads, true),
                })
                .collect(),
        }
    }
}

pub fn fusion_stack<'a>(
    s: Scope<'a>,
    mut z_ts: Var<'a>,
    mut z_txt: Var<'a>,
    stack: &FusionStack,
) -> Result<(Var<'a>, Var<'a>), TensorError> {
    for layer in &stack.layers {
        let (a, b) = (&layer.ts, &layer.txt);
        let h_ts = self_attend(s, z_ts, &a.ln_self, &a.self_attn)?;
        let h_txt = self_attend(s, z_txt, &b.ln_self, &b.self_attn)?;
        let c_ts = cross_attend(s, h_ts, h_txt, cross_ln(a), cross_mha(a))?;
        let c_txt = cross_attend(s, h_txt, h_ts, cross_ln(b), cross_mha(b))?;
        z_ts = a.ffn.forward(s, c_ts)?;
        z_txt = b.ffn.forward(s, c_txt)?;
    }
    Ok((z_ts, z_txt))
}

fn cross_ln(b: &StreamBlock) -> &LayerNorm {
    b.ln_cross.as_ref().expect("fusion blocks carry cross-attention")
}

fn cross_mha(b: &StreamBlock) -> &MultiHeadAttention {
    b.cross_attn.as_ref().expect("fusion blocks carry cross-attention")
}

/// Self-attention-only encoder for a single stream.
#[derive(Debug, Clone)]
pub struct SingleStack {
    pub layers: Vec<StreamBlock>,
}

impl SingleStack {
    pub fn new(store: &mut ParamStore, name: &str, j: usize, d_h: usize, heads: usize) -> Self {
        assert!(j >= 1, "encoder needs at least one layer");
        Self {
            layers: (0..j)
                .map(|l| StreamBlock::new(store, &format!("{name}.l{l}"), d_h, heads, false))
                .collect(),
        }
    }
}

pub fn single_stack<'a>(s: Scope<'a>, mut z: Var<'a>, stack: &SingleStack) -> Result<Var<'a>, TensorError> {
    for b in &stack.layers {
        z = b.ffn.forward(s, self_attend(s, z, &b.ln_self, &b.self_attn)?)?;
    }
    Ok(z)
}

/// `d_in → d_h → relu → n_out` on the last row of each input stream.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub hidden: Linear,
    pub out: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_h: usize, n_out: usize) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_h, true),
            out: Linear::new(store, &format!("{name}.out"), d_h, n_out, true),
        }
    }
}

/// Concatenates the last row of every stream and maps it to `1 × n_out`
/// logits.
pub fn classify<'a>(s: Scope<'a>, streams: &[Var<'a>], c: &Classifier) -> Result<Var<'a>, TensorError> {
    let last = streams
        .iter()
        .map(|z| z.select_row(z.rows() - 1))
        .collect::<Result<Vec<_>, _>>()?;
    let x = if last.len() == 1 {
        last[0]
    } else {
        Var::concat_cols(&last)?
    };
    let h = c.hidden.forward(s, x)?.relu();
    c.out.forward(s, h)
}
