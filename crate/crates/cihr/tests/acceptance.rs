//! End-to-end acceptance suite. Each test prints one PASS line; criteria
//! cover metric arithmetic, gradients, the unconditioned reduction, init
//! inertness, planted-signal learning, individuality separation,
//! normalization invariants, and determinism/persistence.

use cihr::commonality::{AnalysisCache, Analyzer, BackendKind, Perspective};
use cihr::config::TrainConfig;
use cihr::data::{generate_synthetic, is_style_dependent, SynthConfig, AMBIG_MARKER, MARKER};
use cihr::model::{df, sf, Ablation, CihrModel, ModelDims};
use cihr::model::df::{ClassifierParams, DfParams};
use cihr::model::params::ParamStore;
use cihr::numerics::{ops, SplitMix64, Tape, Tensor};
use cihr::tokenizer::{TokenSequence, Vocab};
use cihr::train::{
    compute_metrics, evaluate, f1_score, full_model_gradcheck, load_model, predict_all,
    run_training, save_model,
};

// ---- A1: metric arithmetic ----------------------------------------------

#[test]
fn a1_metric_arithmetic() {
    let cases = [(83.73, 83.01, 83.37), (82.98, 79.97, 81.45)];
    for (p, r, want) in cases {
        let f1 = f1_score(p, r);
        assert!(
            (f1 - want).abs() <= 0.01,
            "F1({p}, {r}) = {f1}, want {want} ± 0.01"
        );
    }
    // the same arithmetic through the confusion-matrix path
    let m = compute_metrics(&[1, 1, 0, 1], &[1, 0, 0, 1]);
    assert!((m.f1 - f1_score(m.precision, m.recall)).abs() < 1e-12);
    println!("A1: PASS — F1 inversion matches published operating points");
}

// ---- A2: full-model gradient check --------------------------------------

#[test]
fn a2_full_model_gradient_check() {
    let err = full_model_gradcheck(7).unwrap();
    assert!(err < 1e-4, "max relative error {err:.3e} >= 1e-4");
    println!("A2: PASS — max relative error {err:.3e} < 1e-4");
}

// ---- A3: reduction to an unconditioned encoder --------------------------

fn mm(a: &[f64], ra: usize, ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ra * cb];
    for i in 0..ra {
        for j in 0..cb {
            let mut s = 0.0;
            for k in 0..ca {
                s += a[i * ca + k] * b[k * cb + j];
            }
            out[i * cb + j] = s;
        }
    }
    out
}

fn add_bias(h: &mut [f64], cols: usize, b: &[f64]) {
    for (i, v) in h.iter_mut().enumerate() {
        *v += b[i % cols];
    }
}

fn ref_softmax_rows(s: &mut [f64], cols: usize) {
    for row in s.chunks_mut(cols) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn ref_layer_norm(h: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; h.len()];
    for (r, row) in h.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = gamma[j] * (row[j] - mean) * s + beta[j];
        }
    }
    out
}

fn ref_gelu(h: &mut [f64]) {
    let c0 = 0.797_884_560_802_865_4;
    let c1 = 0.044715;
    for v in h.iter_mut() {
        *v = 0.5 * *v * (1.0 + (c0 * (*v + c1 * *v * *v * *v)).tanh());
    }
}

/// Plain post-norm transformer encoder over the same weights, written
/// against raw `Vec<f64>` with no tape involvement.
fn reference_encode(model: &CihrModel, seq: &TokenSequence) -> Vec<f64> {
    let d = model.dims.d;
    let k_heads = model.dims.k_heads;
    let dk = d / k_heads;
    let l = seq.len();
    let get = |name: &str| model.store.get(name).unwrap().to_vec();

    let word = get("encoder.embed.word");
    let pos = get("encoder.embed.position");
    let seg = get("encoder.embed.segment");
    let mut h = vec![0.0; l * d];
    for i in 0..l {
        for j in 0..d {
            h[i * d + j] = word[seq.ids[i] * d + j]
                + pos[i * d + j]
                + seg[seq.segments[i] as usize * d + j];
        }
    }

    for li in 0..model.dims.n_layers {
        let lp = format!("encoder.layer.{li}");
        let mut ctx = vec![0.0; l * d];
        for hj in 0..k_heads {
            let hp = format!("{lp}.attn.head.{hj}");
            let mut q = mm(&h, l, d, &get(&format!("{hp}.q.w")), dk);
            add_bias(&mut q, dk, &get(&format!("{hp}.q.b")));
            let mut k = mm(&h, l, d, &get(&format!("{hp}.k.w")), dk);
            add_bias(&mut k, dk, &get(&format!("{hp}.k.b")));
            let mut v = mm(&h, l, d, &get(&format!("{hp}.v.w")), dk);
            add_bias(&mut v, dk, &get(&format!("{hp}.v.b")));
            let scale = 1.0 / (dk as f64).sqrt();
            let mut s = vec![0.0; l * l];
            for i in 0..l {
                for j in 0..l {
                    let mut dot = 0.0;
                    for t in 0..dk {
                        dot += q[i * dk + t] * k[j * dk + t];
                    }
                    s[i * l + j] = dot * scale + if seq.mask[j] == 0 { -1e30 } else { 0.0 };
                }
            }
            ref_softmax_rows(&mut s, l);
            let o = mm(&s, l, l, &v, dk);
            for i in 0..l {
                for t in 0..dk {
                    ctx[i * d + hj * dk + t] = o[i * dk + t];
                }
            }
        }
        let mut attn = mm(&ctx, l, d, &get(&format!("{lp}.attn.out.w")), d);
        add_bias(&mut attn, d, &get(&format!("{lp}.attn.out.b")));
        let resid: Vec<f64> = h.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h1 = ref_layer_norm(
            &resid,
            d,
            &get(&format!("{lp}.ln1.gamma")),
            &get(&format!("{lp}.ln1.beta")),
            model.dims.ln_eps,
        );
        let mut f = mm(&h1, l, d, &get(&format!("{lp}.ffn.w1")), 4 * d);
        add_bias(&mut f, 4 * d, &get(&format!("{lp}.ffn.b1")));
        ref_gelu(&mut f);
        let mut f2 = mm(&f, l, 4 * d, &get(&format!("{lp}.ffn.w2")), d);
        add_bias(&mut f2, d, &get(&format!("{lp}.ffn.b2")));
        let resid2: Vec<f64> = h1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        h = ref_layer_norm(
            &resid2,
            d,
            &get(&format!("{lp}.ln2.gamma")),
            &get(&format!("{lp}.ln2.beta")),
            model.dims.ln_eps,
        );
    }
    h
}

#[test]
fn a3_reduction_to_unconditioned_encoder() {
    let vocab = Vocab::build(
        &["one two three four five six seven eight nine ten".to_string()],
        1,
    )
    .unwrap();
    let dims = ModelDims {
        d: 16,
        k_heads: 2,
        n_layers: 2,
        max_len: 12,
        n_d: 2,
        ln_eps: 1e-5,
        vocab_size: vocab.size(),
        feat_width: 4,
    };
    let model = CihrModel::init(dims, Ablation::None, 11).unwrap();
    // randomize everything except the modulation biases, which must stay
    // zero for the conditioning to vanish at e^z = 0
    let mut rng = SplitMix64::new(404);
    for (name, t) in model.store.iter() {
        if name.ends_with("sigma.b")
            || name.ends_with("mu.b")
            || name.ends_with("gain.b")
            || name.ends_with("bias.b")
        {
            continue;
        }
        let v: Vec<f64> = (0..t.numel()).map(|_| rng.next_normal() * 0.2).collect();
        t.set_values(&v);
    }

    let e_z = Tensor::zeros(vec![dims.d]);
    let mut max_dev: f64 = 0.0;
    for trial in 0..50u64 {
        let mut r = SplitMix64::new(1000 + trial);
        let l = dims.max_len;
        let n_real = 2 + r.below(l - 2);
        let seq = TokenSequence {
            ids: (0..l)
                .map(|i| if i < n_real { r.below(vocab.size()) } else { 0 })
                .collect(),
            segments: (0..l).map(|i| (i < n_real && r.coin()) as u8).collect(),
            mask: (0..l).map(|i| (i < n_real) as u8).collect(),
        };
        let tape = Tape::new();
        let ours = sf::sf_encode(&tape, &seq, &model.tables, &e_z, &model.stack)
            .unwrap()
            .to_vec();
        let reference = reference_encode(&model, &seq);
        for (a, b) in ours.iter().zip(&reference) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    assert!(max_dev <= 1e-12, "max deviation {max_dev:.3e} > 1e-12");
    println!("A3: PASS — 50 inputs, max deviation {max_dev:.3e} <= 1e-12");
}

// ---- A4: init inertness --------------------------------------------------

#[test]
fn a4_init_inertness() {
    let vocab = Vocab::build(
        &["joke text words profile city desert".to_string()],
        1,
    )
    .unwrap();
    let dims = ModelDims {
        d: 16,
        k_heads: 2,
        n_layers: 2,
        max_len: 12,
        n_d: 2,
        ln_eps: 1e-5,
        vocab_size: vocab.size(),
        feat_width: 5,
    };
    let model = CihrModel::init(dims, Ablation::None, 3).unwrap();
    let ep = |x: &str, a: Option<&str>| cihr::tokenizer::encode_pair(&vocab, x, a, dims.max_len);
    let base = cihr::model::SampleInput {
        perspectives: vec![ep("joke text", Some("words")), ep("joke text", None)],
        posts: vec![ep("words words", None)],
        static_text: ep("city", None),
        features: vec![0.0, 1.0, 0.0, 0.0, 0.0],
        label: 1,
    };
    let mut other = base.clone();
    other.static_text = ep("desert profile", None);
    other.features = vec![1.3, 0.0, 1.0, -2.0, 0.5];

    let tape = Tape::new();
    let pa = model.forward(&tape, &base).unwrap().probs.to_vec();
    let pb = model.forward(&tape, &other).unwrap().probs.to_vec();
    let dev = pa
        .iter()
        .zip(&pb)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(dev <= 1e-10, "profile leaked at init: {dev:.3e}");
    println!("A4: PASS — fresh-init output difference {dev:.3e} <= 1e-10");
}

// ---- A5: planted-signal convergence (rho = 0) ---------------------------

#[test]
fn a5_planted_signal_convergence() {
    let ds = generate_synthetic(&SynthConfig {
        n_users: 200,
        n_samples: 2000,
        rho: 0.0,
        posts_per_user: 4,
        seed: 17,
    });
    let cfg = TrainConfig::parse(
        "d = 64\nk = 2\nn_layers = 2\nmax_len = 24\nn_a = 1\nn_d = 2\n\
         batch_size = 32\nmax_epochs = 20\nseed = 17\nsplit_mode = by-user\n\
         early_stop_acc = 90\n",
    )
    .unwrap();
    let mut analyzer = Analyzer::new(BackendKind::Stub, AnalysisCache::in_memory()).unwrap();
    let art = run_training(&ds, &cfg, &mut analyzer, |line| println!("  {line}")).unwrap();
    let best = art
        .report
        .history
        .iter()
        .map(|e| e.valid.accuracy)
        .fold(0.0f64, f64::max);
    assert!(
        best >= 90.0,
        "validation accuracy peaked at {best:.2} < 90 within {} epochs",
        art.report.history.len()
    );
    println!(
        "A5: PASS — validation accuracy {best:.2} >= 90 after {} epoch(s)",
        art.report.history.len()
    );
}

// ---- A6: individuality separation (rho = 0.5) ---------------------------

fn style_bit(region: &str) -> u8 {
    match region {
        "plains" | "coast" => 0,
        _ => 1,
    }
}

#[test]
fn a6_individuality_separation() {
    let n_samples = 3000;
    let rho = 0.5;
    let ds = generate_synthetic(&SynthConfig {
        n_users: 300,
        n_samples,
        rho,
        posts_per_user: 4,
        seed: 23,
    });
    // oracle: brute-force re-derivation of the generator's label rule on
    // the style-dependent share
    for (i, s) in ds.samples.iter().enumerate() {
        let m = s.text.split_whitespace().any(|w| w == MARKER) as u8;
        let tagged = s.text.split_whitespace().any(|w| w == AMBIG_MARKER);
        assert_eq!(tagged, is_style_dependent(i, n_samples, rho), "{}", s.id);
        let want = if tagged {
            m ^ style_bit(&ds.users[&s.user_id].region)
        } else {
            m
        };
        assert_eq!(s.label, want, "oracle mismatch at {}", s.id);
    }

    let base = "d = 32\nk = 2\nn_layers = 1\nmax_len = 24\nn_a = 1\nn_d = 2\n\
                batch_size = 32\nseed = 23\nsplit_mode = by-user\n";
    let run = |extra: &str| {
        let cfg = TrainConfig::parse(&format!("{base}{extra}")).unwrap();
        let mut analyzer = Analyzer::new(BackendKind::Stub, AnalysisCache::in_memory()).unwrap();
        run_training(&ds, &cfg, &mut analyzer, |line| println!("  {line}")).unwrap()
    };

    println!("  [full model]");
    let full = run("max_epochs = 60\nearly_stop_acc = 97\n");
    println!("  [w/o SI]");
    let nosi = run("max_epochs = 6\nablation = no-si\n");

    // accuracy on the style-dependent subset of the held-out test split
    let dep_acc = |art: &cihr::train::TrainedArtifacts| {
        let idx: Vec<usize> = art
            .split
            .test
            .iter()
            .copied()
            .filter(|&i| {
                let n: usize = ds.samples[i].id[1..].parse().unwrap();
                is_style_dependent(n, n_samples, rho)
            })
            .collect();
        assert!(idx.len() >= 40, "dependent test subset too small: {}", idx.len());
        let preds = predict_all(&art.model, &art.inputs, &idx).unwrap();
        let labels: Vec<u8> = idx.iter().map(|&i| art.inputs[i].label).collect();
        compute_metrics(&preds, &labels).accuracy
    };
    let full_acc = dep_acc(&full);
    let nosi_acc = dep_acc(&nosi);
    assert!(
        full_acc >= 80.0,
        "full model dependent-subset accuracy {full_acc:.2} < 80"
    );
    assert!(
        nosi_acc <= 60.0,
        "w/o SI dependent-subset accuracy {nosi_acc:.2} > 60"
    );
    println!(
        "A6: PASS — dependent-subset accuracy: full {full_acc:.2} >= 80, w/o SI {nosi_acc:.2} <= 60"
    );
}

// ---- A7: normalization invariants ---------------------------------------

#[test]
fn a7_normalization_invariants() {
    let mut rng = SplitMix64::new(777);
    let mut worst_row_sum: f64 = 0.0;
    for trial in 0..1000 {
        let d = [2, 4, 8][rng.below(3)];
        let rows = 1 + rng.below(4);
        let scale = [0.05, 1.0, 20.0][rng.below(3)];

        // softmax rows sum to one, with and without masking
        let tape = Tape::new();
        let score_vals: Vec<f64> = (0..rows * d).map(|_| rng.next_normal() * scale).collect();
        let scores = Tensor::from_vec(vec![rows, d], score_vals);
        let mut key_mask = vec![1u8; d];
        for j in 1..d {
            key_mask[j] = rng.coin() as u8;
        }
        let masked = ops::add(&tape, &scores, &sf::attention_mask_bias(rows, &key_mask));
        for probe in [ops::softmax_lastdim(&tape, &scores), ops::softmax_lastdim(&tape, &masked)] {
            for row in probe.to_vec().chunks(d) {
                worst_row_sum = worst_row_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }

        // gate output is a strict convex combination
        let mut store = ParamStore::new();
        let mut prng = rng.fork(trial as u64);
        let df_p = DfParams::init(&mut store, d, 1, &mut prng).unwrap();
        let clf = ClassifierParams::init(&mut store, d, &mut prng);
        for t in store.tensors() {
            let v: Vec<f64> = (0..t.numel()).map(|_| prng.next_normal() * scale).collect();
            t.set_values(&v);
        }
        let h_a = Tensor::from_vec(
            vec![rows, d],
            (0..rows * d).map(|_| prng.next_normal() * scale).collect(),
        );
        let h_d = Tensor::from_vec(
            vec![rows, d],
            (0..rows * d).map(|_| prng.next_normal() * scale).collect(),
        );
        let present = vec![1u8; rows];
        let h_p = df::mha_cross(&tape, &h_a, &h_d, &present, &df_p).unwrap();
        let (h_o, alpha) = df::gated_fuse(&tape, &h_a, &h_p, &df_p).unwrap();
        let a = alpha.value();
        assert!(a > 0.0 && a < 1.0, "trial {trial}: gate {a} outside (0,1)");
        let h_x = ops::mean_axis(&tape, &h_a, 0).to_vec();
        let h_t = ops::mean_axis(&tape, &h_p, 0).to_vec();
        for (j, v) in h_o.to_vec().iter().enumerate() {
            let (lo, hi) = (h_x[j].min(h_t[j]), h_x[j].max(h_t[j]));
            assert!(
                *v >= lo - 1e-9 && *v <= hi + 1e-9,
                "trial {trial}: h_o[{j}] = {v} outside [{lo}, {hi}]"
            );
        }

        // cross-entropy of a proper distribution is non-negative
        let probs = df::predict(&tape, &ops::mean_axis(&tape, &h_a, 0), &clf).unwrap();
        let loss = df::cross_entropy_sample(&tape, &probs, rng.coin() as u8);
        assert!(loss.value() >= 0.0, "trial {trial}: negative loss");
    }
    assert!(worst_row_sum <= 1e-9, "softmax row sum off by {worst_row_sum:.3e}");
    println!("A7: PASS — 1000 trials, worst softmax row-sum deviation {worst_row_sum:.3e}");
}

// ---- A8: determinism and persistence ------------------------------------

#[test]
fn a8_determinism_and_persistence() {
    let make = || {
        generate_synthetic(&SynthConfig {
            n_users: 12,
            n_samples: 80,
            rho: 0.0,
            posts_per_user: 3,
            seed: 31,
        })
    };
    let cfg = TrainConfig::parse(
        "d = 16\nk = 2\nn_layers = 1\nmax_len = 20\nn_a = 6\nn_d = 2\n\
         batch_size = 16\nmax_epochs = 2\nseed = 31\nsplit_mode = by-user\n",
    )
    .unwrap();
    let run = || {
        let ds = make();
        let mut analyzer = Analyzer::new(BackendKind::Stub, AnalysisCache::in_memory()).unwrap();
        run_training(&ds, &cfg, &mut analyzer, |_| {}).unwrap()
    };

    // same seed/config → bit-identical loss curves
    let a = run();
    let b = run();
    for (ea, eb) in a.report.history.iter().zip(&b.report.history) {
        assert_eq!(
            ea.train_loss.to_bits(),
            eb.train_loss.to_bits(),
            "loss curves diverge at epoch {}",
            ea.epoch
        );
    }

    // checkpoint round trip → bit-identical evaluation
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    save_model(&ckpt, &a.model, &cfg, &a.vocab, &a.normalizer).unwrap();
    let (loaded, _, _) = load_model(&ckpt, &a.vocab).unwrap();
    let before = evaluate(&a.model, &a.inputs, &a.split.test).unwrap();
    let after = evaluate(&loaded, &a.inputs, &a.split.test).unwrap();
    assert_eq!(before, after, "evaluation changed across checkpoint reload");
    assert_eq!(
        predict_all(&a.model, &a.inputs, &a.split.test).unwrap(),
        predict_all(&loaded, &a.inputs, &a.split.test).unwrap()
    );

    // stub-populated cache replays byte-identically
    let cache_path = dir.path().join("cache.jsonl");
    let texts = ["a joke about trains", "dry toast commentary"];
    {
        let mut stub =
            Analyzer::new(BackendKind::Stub, AnalysisCache::open(&cache_path).unwrap()).unwrap();
        for t in &texts {
            stub.analyze_all(t).unwrap();
        }
    }
    let bytes_once = std::fs::read(&cache_path).unwrap();
    let mut replay =
        Analyzer::new(BackendKind::Replay, AnalysisCache::open(&cache_path).unwrap()).unwrap();
    for t in &texts {
        let recs = replay.analyze_all(t).unwrap();
        let again = replay.analyze(t, Perspective::Semantic).unwrap();
        assert_eq!(recs[0], again);
        assert_eq!(recs.len(), 6);
    }
    let bytes_after = std::fs::read(&cache_path).unwrap();
    assert_eq!(bytes_once, bytes_after, "replay mutated the cache file");

    println!("A8: PASS — loss curves, checkpoints, and replay are deterministic");
}
