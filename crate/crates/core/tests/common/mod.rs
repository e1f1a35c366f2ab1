//! Plain-`Vec` reference math and shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphmt::decoder::{AttendMode, DecoderConfig};
use graphmt::encoder::EncoderConfig;
use graphmt::graph::{build_graph_with, EdgeMode, MultiModalGraph, PhraseGrounding};
use graphmt::model::{Model, ModelConfig};
use graphmt::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    if c == 0 {
        return vec![vec![]; t.shape()[0]];
    }
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn param(m: &Model, name: &str) -> Mat {
    let t = m.store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    mat(t)
}

pub fn vector(m: &Model, name: &str) -> Vec<f64> {
    m.store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let sd = (var + 1e-6).sqrt();
            r.iter().enumerate().map(|(i, x)| (x - mu) / sd * g[i] + b[i]).collect()
        })
        .collect()
}

pub fn cols(a: &Mat, start: usize, w: usize) -> Mat {
    a.iter().map(|r| r[start..start + w].to_vec()).collect()
}

/// Multi-head attention with optional value/output projections and an
/// optional causal mask.
pub fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: Option<&Mat>,
    wo: Option<&Mat>,
    heads: usize,
    causal: bool,
) -> Mat {
    let q = matmul(q_in, wq);
    let k = matmul(kv_in, wk);
    let v = match wv {
        Some(w) => matmul(kv_in, w),
        None => kv_in.clone(),
    };
    let d = wq[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q_in.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&q, h * dh, dh), cols(&k, h * dh, dh), cols(&v, h * dh, dh));
        for i in 0..q_in.len() {
            let n_keys = if causal { i + 1 } else { kv_in.len() };
            let scores: Vec<f64> = (0..n_keys)
                .map(|j| qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax_row(&scores);
            for c in 0..dh {
                out[i][h * dh + c] = (0..n_keys).map(|j| w[j] * vh[j][c]).sum();
            }
        }
    }
    match wo {
        Some(w) => matmul(&out, w),
        None => out,
    }
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    let h: Mat = add_bias(&matmul(x, w1), b1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    add_bias(&matmul(&h, w2), b2)
}

/// Sinusoid written from the closed form rather than the library's loop.
pub fn pe(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = pos as f64 * (-(2.0 * k / d as f64) * 10000f64.ln()).exp();
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn random_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(m: &Mat, cols: usize) -> Tensor {
    Tensor::new(vec![m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub const FEAT: usize = 5;
pub const VOCAB: usize = 12;

pub fn small_config(layers: usize, attend: AttendMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            d_ff: 10,
            n_heads: 2,
            n_layers: layers,
            dropout: 0.0,
            visual_feat_dim: FEAT,
            unified_parameters: false,
            inter_modal_fusion: true,
        },
        decoder: DecoderConfig {
            d_model: 8,
            d_ff: 10,
            n_heads: 2,
            n_layers: 2,
            dropout: 0.0,
            attend,
        },
        src_vocab: VOCAB,
        tgt_vocab: VOCAB,
    }
}

/// A random grounded graph with 2–7 tokens and 0–3 objects.
pub fn random_graph(seed: u64, min_objects: usize, mode: EdgeMode) -> MultiModalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..8);
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(4..VOCAB)).collect();
    let k = rng.gen_range(min_objects..=3);
    let groundings: Vec<PhraseGrounding> = (0..k)
        .map(|_| {
            let s = rng.gen_range(0..n);
            let e = rng.gen_range(s + 1..=n);
            let objs = rng.gen_range(1..=2);
            let feats = (0..objs).map(|_| (0..FEAT).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            PhraseGrounding::new(s, e, feats)
        })
        .collect();
    build_graph_with(&tokens, &groundings, FEAT, mode).unwrap()
}

pub fn randomize_features(g: &MultiModalGraph, seed: u64) -> MultiModalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = g.clone();
    for x in g.visual_features_mut() {
        *x = rng.gen_range(-5.0..5.0);
    }
    g
}

/// Random examples over `random_graph` sources with 1–5 token targets.
pub fn random_examples(seed: u64, n: usize) -> Vec<graphmt::Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let len = rng.gen_range(1..=5);
            let mut target = vec![graphmt::vocab::BOS];
            target.extend((0..len).map(|_| rng.gen_range(4..VOCAB)));
            target.push(graphmt::vocab::EOS);
            graphmt::Example {
                graph: random_graph(seed.wrapping_mul(31).wrapping_add(k as u64), 1, EdgeMode::Grounded),
                target,
            }
        })
        .collect()
}

/// One fusion layer written out step by step from the layer equations.
pub fn oracle_fusion_layer(m: &Model, l: usize, h_x: &Mat, h_o: &Mat, g: &MultiModalGraph, last: bool) -> (Mat, Mat) {
    let t = format!("enc.layer{l}.text");
    let v = format!("enc.layer{l}.visual");
    let gp = format!("enc.layer{l}.gate");
    let p = |n: &str| param(m, n);
    let vec_ = |n: &str| vector(m, n);
    let heads = m.config.encoder.n_heads;

    // Intra-modal attention with residual and norm.
    let a_x = attention(
        h_x,
        h_x,
        &p(&format!("{t}.attn.wq")),
        &p(&format!("{t}.attn.wk")),
        Some(&p(&format!("{t}.attn.wv"))),
        Some(&p(&format!("{t}.attn.wo"))),
        heads,
        false,
    );
    let c_x = layer_norm(&add(h_x, &a_x), &vec_(&format!("{t}.attn_ln.gain")), &vec_(&format!("{t}.attn_ln.bias")));
    let a_o = attention(h_o, h_o, &p(&format!("{v}.attn.wq")), &p(&format!("{v}.attn.wk")), None, None, heads, false);
    let c_o = layer_norm(&add(h_o, &a_o), &vec_(&format!("{v}.attn_ln.gain")), &vec_(&format!("{v}.attn_ln.bias")));

    // Cross-modal gating, summed per node over its neighbours.
    let (w1, w2, w3, w4) = (p(&format!("{gp}.w1")), p(&format!("{gp}.w2")), p(&format!("{gp}.w3")), p(&format!("{gp}.w4")));
    let d = h_x[0].len();
    let mut s_x = vec![vec![0.0; d]; h_x.len()];
    let mut s_o = vec![vec![0.0; d]; h_o.len()];
    for i in 0..h_x.len() {
        for j in 0..h_o.len() {
            if !g.has_edge(i, j) {
                continue;
            }
            let ax = add(&matmul(&vec![c_x[i].clone()], &w1), &matmul(&vec![c_o[j].clone()], &w2));
            let bo = add(&matmul(&vec![c_o[j].clone()], &w3), &matmul(&vec![c_x[i].clone()], &w4));
            for k in 0..d {
                s_x[i][k] += sigmoid(ax[0][k]) * c_o[j][k];
                s_o[j][k] += sigmoid(bo[0][k]) * c_x[i][k];
            }
        }
    }
    let m_x = layer_norm(&add(&c_x, &s_x), &vec_(&format!("{t}.fuse_ln.gain")), &vec_(&format!("{t}.fuse_ln.bias")));
    let m_o = layer_norm(&add(&c_o, &s_o), &vec_(&format!("{v}.fuse_ln.gain")), &vec_(&format!("{v}.fuse_ln.bias")));

    let f_x = ffn(
        &m_x,
        &p(&format!("{t}.ffn.w1")),
        &vec_(&format!("{t}.ffn.b1")),
        &p(&format!("{t}.ffn.w2")),
        &vec_(&format!("{t}.ffn.b2")),
    );
    let out_x = layer_norm(&add(&m_x, &f_x), &vec_(&format!("{t}.ffn_ln.gain")), &vec_(&format!("{t}.ffn_ln.bias")));
    let out_o = if last {
        m_o
    } else {
        let f_o = ffn(
            &m_o,
            &p(&format!("{v}.ffn.w1")),
            &vec_(&format!("{v}.ffn.b1")),
            &p(&format!("{v}.ffn.w2")),
            &vec_(&format!("{v}.ffn.b2")),
        );
        layer_norm(&add(&m_o, &f_o), &vec_(&format!("{v}.ffn_ln.gain")), &vec_(&format!("{v}.ffn_ln.bias")))
    };
    (out_x, out_o)
}

/// Decoder states and generator distribution written out directly.
pub fn oracle_decoder(m: &Model, prefix: &[usize], h_x: &Mat, h_o: &Mat) -> (Mat, Mat) {
    let heads = m.config.decoder.n_heads;
    let attend = m.config.decoder.attend;
    let embed = param(m, "dec.embed");
    let mut s: Mat = prefix
        .iter()
        .enumerate()
        .map(|(p, &t)| embed[t].iter().zip(pe(p, 8)).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..m.config.decoder.n_layers {
        let n = |x: &str| format!("dec.layer{l}.{x}");
        let att = |q: &Mat, kv: &Mat, pre: &str, causal: bool| {
            attention(
                q,
                kv,
                &param(m, &n(&format!("{pre}.wq"))),
                &param(m, &n(&format!("{pre}.wk"))),
                Some(&param(m, &n(&format!("{pre}.wv")))),
                Some(&param(m, &n(&format!("{pre}.wo")))),
                heads,
                causal,
            )
        };
        let ln = |x: &Mat, pre: &str| layer_norm(x, &vector(m, &n(&format!("{pre}.gain"))), &vector(m, &n(&format!("{pre}.bias"))));
        let e = ln(&add(&s, &att(&s, &s, "self_attn", true)), "self_ln");
        let mem = if attend == AttendMode::VisualOnly { h_o } else { h_x };
        let mut ctx_ = att(&e, mem, "cross", false);
        if attend == AttendMode::Both {
            ctx_ = add(&ctx_, &att(&e, h_o, "cross_visual", false));
        }
        let t = ln(&add(&e, &ctx_), "cross_ln");
        let f = ffn(
            &t,
            &param(m, &n("ffn.w1")),
            &vector(m, &n("ffn.b1")),
            &param(m, &n("ffn.w2")),
            &vector(m, &n("ffn.b2")),
        );
        s = ln(&add(&t, &f), "ffn_ln");
    }
    let logits = add_bias(&matmul(&s, &param(m, "dec.generator.w")), &vector(m, "dec.generator.b"));
    let probs = logits.iter().map(|r| softmax_row(r)).collect();
    (s, probs)
}
