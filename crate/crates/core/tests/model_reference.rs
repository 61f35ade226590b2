//! The graph-based forward pass against a plain-loop reimplementation.

use ppf_core::model::{build_model, MatrixKind, Model, ModelConfig};

fn matvec_nt(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum())
        .collect()
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * s * g).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn param<'a>(m: &'a Model, name: &str) -> &'a [f64] {
    m.params().get(name).unwrap().value.data()
}

/// Hidden states after every block for one window of tokens.
fn reference(m: &Model, tokens: &[usize]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let c = m.config();
    let (d, hd, f) = (c.d_model, c.head_dim(), c.d_ffn);
    let rep = c.n_heads / c.n_kv_heads;
    let tok = param(m, "tok_emb");
    let pos = param(m, "pos_emb");
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect())
        .collect();
    let mut states = Vec::new();
    for l in 0..c.n_layers {
        let w = |k: MatrixKind| m.weight(l, k).data();
        let an = param(m, &format!("layers.{l}.attn_norm"));
        let h: Vec<Vec<f64>> = x.iter().map(|r| rms(r, an)).collect();
        let kv = c.kv_width();
        let q: Vec<_> = h.iter().map(|r| matvec_nt(w(MatrixKind::Q), d, d, r)).collect();
        let k: Vec<_> = h.iter().map(|r| matvec_nt(w(MatrixKind::K), kv, d, r)).collect();
        let v: Vec<_> = h.iter().map(|r| matvec_nt(w(MatrixKind::V), kv, d, r)).collect();
        let mut mix = vec![vec![0.0; d]; x.len()];
        for head in 0..c.n_heads {
            let g = head / rep;
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..hd).map(|e| q[i][head * hd + e] * k[j][g * hd + e]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let p = softmax(&scores);
                for e in 0..hd {
                    mix[i][head * hd + e] = (0..=i).map(|j| p[j] * v[j][g * hd + e]).sum();
                }
            }
        }
        for (xi, mi) in x.iter_mut().zip(&mix) {
            let o = matvec_nt(w(MatrixKind::O), d, d, mi);
            xi.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        let fnorm = param(m, &format!("layers.{l}.ffn_norm"));
        for xi in x.iter_mut() {
            let h2 = rms(xi, fnorm);
            let up = matvec_nt(w(MatrixKind::Up), f, d, &h2);
            let gate = matvec_nt(w(MatrixKind::Gate), f, d, &h2);
            let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            let down = matvec_nt(w(MatrixKind::Down), d, f, &hidden);
            xi.iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
        states.push(x.clone());
    }
    let fin = param(m, "final_norm");
    let head = param(m, "lm_head");
    let probs = x
        .iter()
        .map(|r| softmax(&matvec_nt(head, c.vocab, d, &rms(r, fin))))
        .collect();
    (states, probs)
}

fn compare(m: &Model) {
    let toks: Vec<usize> = (0..m.config().seq_len).map(|i| (i * 13 + 5) % m.config().vocab).collect();
    let (states, probs) = reference(m, &toks);
    let io = m.capture_block_io(&toks).unwrap();
    for (l, (_, out)) in io.iter().enumerate() {
        for (t, row) in states[l].iter().enumerate() {
            for (a, b) in out.row(t).iter().zip(row) {
                assert!((a - b).abs() <= 1e-10, "layer {l} pos {t}: {a} vs {b}");
            }
        }
    }
    let p = m.forward_distributions(&toks, None).unwrap();
    for (t, row) in probs.iter().enumerate() {
        for (a, b) in p.row(t).iter().zip(row) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn multi_head_matches_reference() {
    compare(&build_model(ModelConfig::default(), 3).unwrap());
}

#[test]
fn grouped_query_matches_reference() {
    let cfg = ModelConfig {
        n_kv_heads: 2,
        ..ModelConfig::default()
    };
    compare(&build_model(cfg, 4).unwrap());
}

#[test]
fn all_blocks_zeroed_leaves_embedding_to_head() {
    let mut m = build_model(ModelConfig::default(), 5).unwrap();
    for l in 0..8 {
        m.zero_block(l);
    }
    let toks: Vec<usize> = (0..16).collect();
    let p = m.forward_distributions(&toks, None).unwrap();
    let (d, v) = (64, 64);
    let tok = param(&m, "tok_emb");
    let pos = param(&m, "pos_emb");
    for (t, &id) in toks.iter().enumerate() {
        let x: Vec<f64> = (0..d).map(|j| tok[id * d + j] + pos[t * d + j]).collect();
        let want = softmax(&matvec_nt(param(&m, "lm_head"), v, d, &rms(&x, param(&m, "final_norm"))));
        for (a, b) in p.row(t).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
