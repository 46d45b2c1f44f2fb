//! Structural checks of the sequence models against hand-written
//! references.

use apesed::dataset::seeded_pcg;
use apesed::features::{FeatureKind, FrameMatrix};
use apesed::nn::{Arch, Mat, Mode, ModelConfig, SequenceModel};
use rand::Rng;

const IN: usize = 5;
const H: usize = 6;
const K: usize = 3;

fn model(arch: Arch, seed: u64) -> SequenceModel<f64> {
    let config = ModelConfig {
        hidden_size: H,
        heads: 2,
        layers: 2,
        dropout: 0.0,
        ..ModelConfig::new(arch, IN, K)
    };
    let mut m: SequenceModel<f64> = SequenceModel::init(config, seed).unwrap().cast();
    let mut rng = seeded_pcg(seed + 100);
    for p in &mut m.params {
        for w in p.value.as_mut_slice() {
            *w += rng.random_range(-0.3..0.3);
        }
    }
    m
}

fn input(t: usize, seed: u64) -> FrameMatrix {
    let mut rng = seeded_pcg(seed);
    FrameMatrix {
        clip_id: "x".into(),
        kind: FeatureKind::Waveform,
        values: Mat::from_vec(t, IN, (0..t * IN).map(|_| rng.random_range(-1.0f32..1.0)).collect()),
    }
}

fn permute_rows(m: &FrameMatrix, order: &[usize]) -> FrameMatrix {
    let rows: Vec<f32> = order.iter().flat_map(|&r| m.values.row(r).to_vec()).collect();
    FrameMatrix {
        values: Mat::from_vec(order.len(), m.values.cols(), rows),
        ..m.clone()
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop autoregressive LSTM with dense feedback.
fn reference_ar_lstm(m: &SequenceModel<f64>, x: &FrameMatrix) -> Vec<Vec<f64>> {
    let w_ih = m.param("fwd.w_ih").unwrap();
    let w_hh = m.param("fwd.w_hh").unwrap();
    let b = m.param("fwd.b").unwrap();
    let dw = m.param("dense.w").unwrap();
    let db = m.param("dense.b").unwrap();
    let (mut h, mut c, mut d) = (vec![0.0; H], vec![0.0; H], vec![0.0; K]);
    let mut out = Vec::new();
    for t in 0..x.num_frames() {
        let input: Vec<f64> = x.values.row(t).iter().map(|&v| v as f64).chain(d.iter().copied()).collect();
        let mut pre = b.row(0).to_vec();
        for (j, p) in pre.iter_mut().enumerate() {
            *p += input.iter().enumerate().map(|(i, v)| v * w_ih.get(i, j)).sum::<f64>();
            *p += h.iter().enumerate().map(|(i, v)| v * w_hh.get(i, j)).sum::<f64>();
        }
        for u in 0..H {
            let (ig, fg, gg, og) = (
                sigmoid(pre[u]),
                sigmoid(pre[H + u]),
                pre[2 * H + u].tanh(),
                sigmoid(pre[3 * H + u]),
            );
            c[u] = fg * c[u] + ig * gg;
            h[u] = og * c[u].tanh();
        }
        d = (0..K)
            .map(|k| db.get(0, k) + h.iter().enumerate().map(|(i, v)| v * dw.get(i, k)).sum::<f64>())
            .collect();
        let z: f64 = d.iter().map(|v| v.exp()).sum();
        out.push(d.iter().map(|v| v.exp() / z).collect());
    }
    out
}

#[test]
fn ar_lstm_matches_reference_recurrence() {
    let m = model(Arch::ArLstm, 1);
    let x = input(9, 2);
    let p = m.forward(&x, Mode::Eval).unwrap();
    let reference: Vec<f64> = reference_ar_lstm(&m, &x).concat();
    assert!(max_diff(p.probs.as_slice(), &reference) < 1e-12);
}

#[test]
fn ar_feedback_is_live() {
    let mut m = model(Arch::ArLstm, 3);
    let x = input(6, 4);
    let with = m.forward(&x, Mode::Eval).unwrap();
    let w = m.param_mut("fwd.w_ih").unwrap();
    for r in IN..IN + K {
        w.row_mut(r).fill(0.0);
    }
    let without = m.forward(&x, Mode::Eval).unwrap();
    // the first frame has no feedback yet, later frames must change
    assert!(max_diff(with.probs.row(0), without.probs.row(0)) < 1e-15);
    assert!(max_diff(with.probs.as_slice(), without.probs.as_slice()) > 1e-6);
}

#[test]
fn blstm_is_mirror_symmetric() {
    let m = model(Arch::Blstm, 5);
    let mut swapped = m.clone();
    for name in ["w_ih", "w_hh", "b"] {
        let f = m.param(&format!("fwd.{name}")).unwrap().clone();
        let b = m.param(&format!("bwd.{name}")).unwrap().clone();
        *swapped.param_mut(&format!("fwd.{name}")).unwrap() = b;
        *swapped.param_mut(&format!("bwd.{name}")).unwrap() = f;
    }
    let dw = m.param("dense.w").unwrap();
    let rows: Vec<f64> = (H..2 * H).chain(0..H).flat_map(|r| dw.row(r).to_vec()).collect();
    *swapped.param_mut("dense.w").unwrap() = Mat::from_vec(2 * H, K, rows);

    let x = input(7, 6);
    let rev: Vec<usize> = (0..7).rev().collect();
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = swapped.forward(&permute_rows(&x, &rev), Mode::Eval).unwrap();
    for t in 0..7 {
        assert!(max_diff(a.probs.row(t), b.probs.row(6 - t)) < 1e-12);
    }
}

#[test]
fn ar_blstm_without_backward_half_is_ar_lstm() {
    let bi = {
        let mut m = model(Arch::ArBlstm, 7);
        for p in &mut m.params {
            if p.name.starts_with("bwd") {
                p.value.as_mut_slice().fill(0.0);
            }
        }
        m
    };
    let mut uni = model(Arch::ArLstm, 7);
    for p in &mut uni.params {
        p.value = bi.param(&p.name).unwrap().clone();
    }
    let x = input(8, 8);
    let a = bi.forward(&x, Mode::Eval).unwrap();
    let b = uni.forward(&x, Mode::Eval).unwrap();
    assert!(max_diff(a.probs.as_slice(), b.probs.as_slice()) < 1e-12);
}

#[test]
fn transformer_without_positions_is_permutation_equivariant() {
    let mut m = model(Arch::Transformer, 9);
    let x = input(6, 10);
    let order = [3, 0, 5, 1, 4, 2];
    let permuted = permute_rows(&x, &order);

    m.config.positional_encoding = false;
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = m.forward(&permuted, Mode::Eval).unwrap();
    for (i, &src) in order.iter().enumerate() {
        assert!(max_diff(a.probs.row(src), b.probs.row(i)) < 1e-12);
    }

    m.config.positional_encoding = true;
    let a = m.forward(&x, Mode::Eval).unwrap();
    let b = m.forward(&permuted, Mode::Eval).unwrap();
    let moved = order.iter().enumerate().map(|(i, &src)| max_diff(a.probs.row(src), b.probs.row(i))).fold(0.0, f64::max);
    assert!(moved > 1e-6);
}

#[test]
fn causal_models_ignore_the_future() {
    for arch in [Arch::Lstm, Arch::ArLstm] {
        let m = model(arch, 11);
        let x = input(8, 12);
        let mut y = x.clone();
        y.values.row_mut(7).fill(0.9);
        let a = m.forward(&x, Mode::Eval).unwrap();
        let b = m.forward(&y, Mode::Eval).unwrap();
        assert!(max_diff(&a.probs.as_slice()[..7 * K], &b.probs.as_slice()[..7 * K]) == 0.0);
    }
}
