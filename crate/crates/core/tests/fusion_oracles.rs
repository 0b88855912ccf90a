mod common;

use common::*;
use ehrfuse_core::fusion::{
    classify, fusion_stack, single_stack, Classifier, FeedForward, FusionStack, SingleStack, StreamBlock,
};
use ehrfuse_core::nn::{ParamStore, Scope};
use ehrfuse_core::tensor::Tape;
use ehrfuse_core::utde::{gate, utde_embed, Gate, GateLevel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Moves every parameter off its initial value so that zero biases and unit
/// norm gains do not hide mistakes.
fn jitter(st: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in st.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn ffn_oracle(x: &Mat, f: &FeedForward, st: &ParamStore) -> Mat {
    let h = relu(&linear(&layer_norm(x, &f.ln, st), &f.inner, st));
    add(x, &linear(&h, &f.outer, st))
}

fn layer_oracle(ts: &Mat, txt: &Mat, a: &StreamBlock, b: &StreamBlock, st: &ParamStore) -> (Mat, Mat) {
    let h_ts = self_attend_oracle(ts, &a.ln_self, &a.self_attn, st);
    let h_txt = self_attend_oracle(txt, &b.ln_self, &b.self_attn, st);
    let c_ts = cross_attend_oracle(
        &h_ts,
        &h_txt,
        a.ln_cross.as_ref().unwrap(),
        a.cross_attn.as_ref().unwrap(),
        st,
    );
    let c_txt = cross_attend_oracle(
        &h_txt,
        &h_ts,
        b.ln_cross.as_ref().unwrap(),
        b.cross_attn.as_ref().unwrap(),
        st,
    );
    (ffn_oracle(&c_ts, &a.ffn, st), ffn_oracle(&c_txt, &b.ffn, st))
}

#[test]
fn one_fusion_layer_matches_the_hand_rolled_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut st = ParamStore::new(2);
    let stack = FusionStack::new(&mut st, "f", 1, 4, 1);
    jitter(&mut st, &mut rng);
    let zt = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let zx = random_tensor(&mut rng, &[2, 4], -1.0, 1.0);
    let tape = Tape::new();
    let s = Scope::new(&tape, &st);
    let (a, b) = fusion_stack(s, s.constant(zt.clone()), s.constant(zx.clone()), &stack).unwrap();
    let l = &stack.layers[0];
    let (wa, wb) = layer_oracle(&to_mat(&zt), &to_mat(&zx), &l.ts, &l.txt, &st);
    assert!(max_diff(&wa, &a.value()) < 1e-9);
    assert!(max_diff(&wb, &b.value()) < 1e-9);
}

#[test]
fn two_layers_with_two_heads_match_the_composed_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut st = ParamStore::new(4);
    let stack = FusionStack::new(&mut st, "f", 2, 8, 2);
    jitter(&mut st, &mut rng);
    let zt = random_tensor(&mut rng, &[3, 8], -1.0, 1.0);
    let zx = random_tensor(&mut rng, &[3, 8], -1.0, 1.0);
    let tape = Tape::new();
    let s = Scope::new(&tape, &st);
    let (a, b) = fusion_stack(s, s.constant(zt.clone()), s.constant(zx.clone()), &stack).unwrap();
    let (mut wa, mut wb) = (to_mat(&zt), to_mat(&zx));
    for l in &stack.layers {
        (wa, wb) = layer_oracle(&wa, &wb, &l.ts, &l.txt, &st);
    }
    assert!(max_diff(&wa, &a.value()) < 1e-9);
    assert!(max_diff(&wb, &b.value()) < 1e-9);
}

#[test]
fn classifier_matches_matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut st = ParamStore::new(6);
    let c = Classifier::new(&mut st, "c", 8, 4, 3);
    jitter(&mut st, &mut rng);
    let (x, y) = (
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
    );
    let tape = Tape::new();
    let s = Scope::new(&tape, &st);
    let got = classify(s, &[s.constant(x.clone()), s.constant(y.clone())], &c)
        .unwrap()
        .value();
    let last: Vec<f64> = x.row(2).iter().chain(y.row(2)).copied().collect();
    let want = linear(&relu(&linear(&vec![last], &c.hidden, &st)), &c.out, &st);
    assert!(max_diff(&want, &got) < 1e-12);
}

#[test]
fn notes_reach_the_numeric_stream_in_the_first_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut st = ParamStore::new(8);
    let stack = FusionStack::new(&mut st, "f", 1, 8, 2);
    let zt = random_tensor(&mut rng, &[4, 8], -1.0, 1.0);
    let zx = random_tensor(&mut rng, &[4, 8], -1.0, 1.0);
    let run = |zx: &ehrfuse_core::tensor::Tensor| {
        let tape = Tape::new();
        let s = Scope::new(&tape, &st);
        fusion_stack(s, s.constant(zt.clone()), s.constant(zx.clone()), &stack)
            .unwrap()
            .0
            .value()
    };
    let base = run(&zx);
    let h = 1e-5;
    for i in 0..zx.len() {
        let mut bumped = zx.clone();
        bumped.data_mut()[i] += h;
        let moved = run(&bumped);
        let largest = base
            .data()
            .iter()
            .zip(moved.data())
            .map(|(a, b)| ((b - a) / h).abs())
            .fold(0.0, f64::max);
        assert!(largest > 1e-8, "note entry {i} has no effect");
    }
}

#[test]
fn fused_numeric_branch_without_cross_output_is_the_single_stream_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut st = ParamStore::new(10);
    let stack = FusionStack::new(&mut st, "f", 2, 8, 2);
    jitter(&mut st, &mut rng);
    for l in &stack.layers {
        let o = &l.ts.cross_attn.as_ref().unwrap().output;
        for p in [o.weight, o.bias.unwrap()] {
            st.get_mut(p).data_mut().fill(0.0);
        }
    }
    let single = SingleStack {
        layers: stack
            .layers
            .iter()
            .map(|l| StreamBlock {
                ln_cross: None,
                cross_attn: None,
                ..l.ts.clone()
            })
            .collect(),
    };
    let zt = random_tensor(&mut rng, &[5, 8], -1.0, 1.0);
    let tape = Tape::new();
    let s = Scope::new(&tape, &st);
    let (fused, _) = fusion_stack(
        s,
        s.constant(zt.clone()),
        s.constant(ehrfuse_core::tensor::Tensor::zeros_like(&zt)),
        &stack,
    )
    .unwrap();
    let alone = single_stack(s, s.constant(zt), &single).unwrap();
    assert_eq!(fused.value(), alone.value());
}

#[test]
fn both_branches_receive_gradient_through_the_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for level in [GateLevel::Patient, GateLevel::Temporal, GateLevel::Hidden] {
        let mut st = ParamStore::new(12);
        let g = Gate::new(&mut st, "g", level, 6);
        jitter(&mut st, &mut rng);
        let (a, b) = (
            random_tensor(&mut rng, &[4, 6], -1.0, 1.0),
            random_tensor(&mut rng, &[4, 6], -1.0, 1.0),
        );
        let w = random_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        let tape = Tape::new();
        let s = Scope::new(&tape, &st);
        let (ea, eb) = (tape.leaf(a), tape.leaf(b));
        let z = utde_embed(ea, eb, gate(s, ea, eb, &g).unwrap()).unwrap();
        let grads = z.mul(tape.constant(w)).unwrap().sum().backward().unwrap();
        for (name, v) in [("imputation", ea), ("attention", eb)] {
            let gr = grads.get(&v).unwrap();
            assert!(
                gr.data().iter().any(|&x| x.abs() > 1e-6),
                "{level}: no gradient to the {name} branch"
            );
        }
    }
}
