mod common;

use common::{naive_matmul, randn, rng};
use proptest::prelude::*;
use vrel_core::autodiff::Tape;
use vrel_core::autodiff::LAYER_NORM_EPS;
use vrel_core::backbone::BoundingBox;
use vrel_core::data::Mode;
use vrel_core::encoder::{attention_record, Encoder, EncoderConfig};
use vrel_core::mask_attention::MaskAttention;
use vrel_core::params::ParamStore;
use vrel_core::sequence::{build_sequence, EmbeddingTables, Segment, TermInput, Vocabulary, CLS, IMG, MASK, SEP};
use vrel_core::tensor::Tensor;

const CFG: EncoderConfig = EncoderConfig {
    layers: 2,
    heads: 4,
    d: 16,
    d_ff: 32,
};

#[test]
fn attention_rows_are_stochastic() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::register(&mut store, &mut r, CFG).unwrap();
        for p in store.iter_mut() {
            if p.name.contains("heads.") {
                p.tensor = p.tensor.map(|v| v * 40.0);
            }
        }
        let x = randn(&mut r, &[11, CFG.d], 2.0);
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = enc.encode(&mut tape, &store, xv, Some(&[(0, 4), (4, 7)])).unwrap();
        for node in &out.attention {
            let rec = attention_record(&tape, *node).unwrap();
            assert_eq!(rec.probs.len(), 2);
            for (span, heads) in rec.spans.iter().zip(&rec.probs) {
                assert_eq!(heads.len(), CFG.heads);
                for h in heads {
                    assert_eq!(h.len(), span.1 * span.1);
                    for row in h.chunks(span.1) {
                        let s: f64 = row.iter().sum();
                        assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
                        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    }
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic_in_f32() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::register(&mut store, &mut r, CFG).unwrap();
    let store = store.cast::<f32>();
    let x = randn(&mut r, &[12, CFG.d], 3.0);
    let mut tape = Tape::<f32>::inference();
    let xv = tape.constant(Tensor::from_f64(&[12, CFG.d], &x.to_f64_vec()).unwrap());
    let out = enc.encode(&mut tape, &store, xv, None).unwrap();
    let rec = attention_record(&tape, out.attention[0]).unwrap();
    for h in &rec.probs[0] {
        for row in h.chunks(12) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn layer_norm_statistics() {
    let mut r = rng(3);
    for &(rows, d, std) in &[(7usize, 16usize, 1.0f64), (3, 64, 5.0), (5, 8, 0.01)] {
        let x = randn(&mut r, &[rows, d], std);
        let src = x.to_f64_vec();
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        let out = tape.value(y).to_f64_vec();
        for (row_in, row) in src.chunks(d).zip(out.chunks(d)) {
            let m_in = row_in.iter().sum::<f64>() / d as f64;
            let v_in = row_in.iter().map(|v| (v - m_in).powi(2)).sum::<f64>() / d as f64;
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            let expected = v_in / (v_in + LAYER_NORM_EPS);
            assert!((var - expected).abs() < 1e-9, "var {var} vs {expected}");
        }
    }
}

#[test]
fn mask_attention_is_min_max_normalized() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let mam = MaskAttention::register(&mut store, &mut r, 6, 8).unwrap();
        let patch = randn(&mut r, &[6, 7, 7], 1.0);
        let word = randn(&mut r, &[1, 8], 1.0);
        let mut tape = Tape::inference();
        let (p, w) = (tape.constant(patch), tape.constant(word));
        let m = mam.compute_attention_mask(&mut tape, &store, p, w).unwrap();
        assert_eq!(tape.shape(m), &[1, 7, 7]);
        let v = tape.value(m).to_f64_vec();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(v.contains(&0.0), "minimum not attained");
        assert!(v.contains(&1.0), "maximum not attained");
    }
}

#[test]
fn constant_mask_input_maps_to_zero() {
    let mut tape = Tape::<f64>::inference();
    let x = tape.constant(Tensor::from_f64(&[1, 2, 2], &[0.3; 4]).unwrap());
    let m = tape.min_max_norm(x);
    assert_eq!(tape.value(m).to_f64_vec(), vec![0.0; 4]);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_mut(d) {
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
        for a in row.iter_mut() {
            *a = (*a - m) / (v + LAYER_NORM_EPS).sqrt();
        }
    }
}

/// Straight-line transcription of one post-norm layer over a single
/// sequence, head by head.
fn dense_layer(store: &ParamStore<f64>, l: usize, x: &[f64], n: usize, cfg: EncoderConfig) -> Vec<f64> {
    let d = cfg.d;
    let dh = d / cfg.heads;
    let w = |name: &str| {
        store
            .by_name(&format!("encoder.layer{l}.{name}"))
            .unwrap()
            .tensor
            .to_f64_vec()
    };
    let (wq, wk, wv, wo) = (w("heads.query"), w("heads.key"), w("heads.value"), w("heads.output"));
    let q = naive_matmul(x, &wq, n, d, d);
    let k = naive_matmul(x, &wk, n, d, d);
    let v = naive_matmul(x, &wv, n, d, d);
    let mut ctx = vec![0.0; n * d];
    for h in 0..cfg.heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                ctx[i * d + h * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    let mixed = naive_matmul(&ctx, &wo, n, d, d);
    let mut hid: Vec<f64> = x.iter().zip(&mixed).map(|(a, b)| a + b).collect();
    layer_norm_rows(&mut hid, d);
    let a: Vec<f64> = naive_matmul(&hid, &w("ffn.w1"), n, d, cfg.d_ff)
        .into_iter()
        .zip(w("ffn.b1").iter().cycle())
        .map(|(v, b)| gelu(v + b))
        .collect();
    let y = naive_matmul(&a, &w("ffn.w2"), n, cfg.d_ff, d);
    let b2 = w("ffn.b2");
    let mut out: Vec<f64> = (0..n * d).map(|i| hid[i] + y[i] + b2[i % d]).collect();
    layer_norm_rows(&mut out, d);
    out
}

#[test]
fn encoder_matches_dense_oracle() {
    let mut r = rng(21);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::register(&mut store, &mut r, CFG).unwrap();
    for p in store.iter_mut() {
        if p.tensor.shape().len() == 2 {
            p.tensor = p.tensor.map(|v| v * 10.0);
        }
    }
    let spans = [(0usize, 5usize), (5, 3)];
    let x = randn(&mut r, &[8, CFG.d], 1.0);
    let src = x.to_f64_vec();
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let out = enc.encode(&mut tape, &store, xv, Some(&spans)).unwrap();
    let got = tape.value(out.output).to_f64_vec();
    for &(start, len) in &spans {
        let mut h = src[start * CFG.d..(start + len) * CFG.d].to_vec();
        for l in 0..CFG.layers {
            h = dense_layer(&store, l, &h, len, CFG);
        }
        for (a, b) in h.iter().zip(&got[start * CFG.d..(start + len) * CFG.d]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn spans_do_not_interact() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::register(&mut store, &mut r, CFG).unwrap();
    let x = randn(&mut r, &[9, CFG.d], 1.0);
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = enc.encode(&mut tape, &store, xv, Some(&[(0, 4), (4, 5)])).unwrap();
        tape.value(out.output).to_f64_vec()
    };
    let base = run(x.clone());
    let mut changed = x.to_f64_vec();
    for v in &mut changed[4 * CFG.d..] {
        *v += 1.0;
    }
    let other = run(Tensor::from_f64(&[9, CFG.d], &changed).unwrap());
    assert_eq!(base[..4 * CFG.d], other[..4 * CFG.d]);
    assert_ne!(base[4 * CFG.d..], other[4 * CFG.d..]);
}

const WORDS: [&str; 12] = [
    "goose", "window", "to", "the", "right", "of", "person", "shoe", "on", "red", "tall", "under",
];

fn label() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..4).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, ..ProptestConfig::default() })]

    #[test]
    fn sequence_layout_invariants(s in label(), p in label(), o in label(), triplet in any::<bool>()) {
        let vocab = Vocabulary::from_labels(WORDS).unwrap();
        let b = BoundingBox::new(1.0, 2.0, 30.0, 40.0);
        let mode = if triplet { Mode::TripletBinary } else { Mode::DoubletVrd };
        let seq = build_sequence(
            &vocab,
            &TermInput { label: &s, bbox: b },
            triplet.then_some(p.as_str()),
            &TermInput { label: &o, bbox: b },
            mode,
        )
        .unwrap();
        let words = |l: &str| l.split_whitespace().count();
        let n_words = words(&s) + words(&o) + if triplet { words(&p) } else { 0 };
        prop_assert_eq!(seq.n_linguistic, n_words + 2);
        prop_assert_eq!(seq.n_answer, 2);
        prop_assert_eq!(seq.n_visual, if triplet { 4 } else { 3 });
        prop_assert_eq!(seq.len(), seq.n_linguistic + seq.n_answer + seq.n_visual);
        let tokens: Vec<usize> = seq.elements.iter().map(|e| e.token).collect();
        prop_assert_eq!(tokens.iter().filter(|&&t| t == MASK).count(), 1);
        prop_assert_eq!(seq.mask_index, seq.n_linguistic);
        prop_assert_eq!(tokens[seq.mask_index], MASK);
        prop_assert_eq!(tokens[0], CLS);
        prop_assert_eq!(tokens[seq.n_linguistic - 1], SEP);
        prop_assert_eq!(tokens[seq.mask_index + 1], SEP);
        prop_assert_eq!(*tokens.last().unwrap(), SEP);
        let n_img = seq.n_visual - 1;
        prop_assert!(tokens[seq.len() - 1 - n_img..seq.len() - 1].iter().all(|&t| t == IMG));
        for (i, e) in seq.elements.iter().enumerate() {
            let want = if i < seq.n_linguistic {
                Segment::Linguistic
            } else if i < seq.n_linguistic + seq.n_answer {
                Segment::Answer
            } else {
                Segment::Visual
            };
            prop_assert_eq!(e.segment, want);
            prop_assert_eq!(e.position, i);
        }
        for t in &seq.terms {
            prop_assert!(!t.word_ids.is_empty());
            prop_assert!(t.word_ids.iter().all(|&w| w >= 5));
            prop_assert_eq!(&tokens[t.first_element..t.first_element + t.word_ids.len()], &t.word_ids[..]);
        }
    }
}

#[test]
fn embedding_is_linear_in_each_table() {
    let vocab = Vocabulary::from_labels(WORDS).unwrap();
    let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
    let seq = build_sequence(
        &vocab,
        &TermInput {
            label: "tall goose",
            bbox: b,
        },
        Some("to the right of"),
        &TermInput {
            label: "window",
            bbox: b,
        },
        Mode::TripletBinary,
    )
    .unwrap();
    let n = seq.len();
    let d = 8;
    let mut r = rng(17);
    let make = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut store = ParamStore::<f64>::new();
        let tables = EmbeddingTables::register(&mut store, r, vocab.len(), d, 32).unwrap();
        for p in store.iter_mut() {
            p.tensor = randn(r, p.tensor.shape(), 1.0);
        }
        (store, tables)
    };
    let (s1, t) = make(&mut r);
    let (s2, _) = make(&mut r);
    let vis = randn(&mut r, &[n, d], 1.0);
    let embed = |store: &ParamStore<f64>, vis: &Tensor<f64>| {
        let mut tape = Tape::inference();
        let v = tape.constant(vis.clone());
        let x = t.embed_sequences(&mut tape, store, &[&seq], v).unwrap();
        tape.value(x).to_f64_vec()
    };
    let zero_vis = Tensor::zeros(&[n, d]);
    for name in ["embeddings.token", "embeddings.segment", "embeddings.position"] {
        let (a, c) = (2.5, -0.75);
        let only = |store: &ParamStore<f64>| {
            let mut s = store.clone();
            for p in s.iter_mut() {
                if p.name != name {
                    p.tensor = p.tensor.map(|_| 0.0);
                }
            }
            s
        };
        let (o1, o2) = (only(&s1), only(&s2));
        let mut mix = o1.clone();
        for p in mix.iter_mut() {
            let t1 = o1.by_name(&p.name).unwrap().tensor.to_f64_vec();
            let t2 = o2.by_name(&p.name).unwrap().tensor.to_f64_vec();
            let v: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + c * y).collect();
            p.tensor = Tensor::from_f64(p.tensor.shape(), &v).unwrap();
        }
        let lhs = embed(&mix, &zero_vis);
        let (e1, e2) = (embed(&o1, &zero_vis), embed(&o2, &zero_vis));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * e1[i] + c * e2[i])).abs() < 1e-6, "{name}");
        }
    }
    let mut zero = s1.clone();
    for p in zero.iter_mut() {
        p.tensor = p.tensor.map(|_| 0.0);
    }
    assert_eq!(embed(&zero, &vis), vis.to_f64_vec());
}
