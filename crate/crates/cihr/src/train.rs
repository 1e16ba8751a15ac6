//! Training: two-group Adam, metrics, the epoch loop with best-checkpoint
//! tracking, evaluation, and checkpoint glue for full models.

use std::path::Path;

use crate::checkpoint::{header_lookup, Checkpoint, CheckpointError, NamedTensor};
use crate::commonality::{build_enhanced_texts, raw_text_view, AnalysisError, Analyzer};
use crate::config::{ConfigError, TrainConfig};
use crate::data::{batches, make_split, DataError, Dataset, Split};
use crate::model::{df, is_encoder_core, Ablation, CihrModel, ModelDims, ModelError, SampleInput};
use crate::numerics::{ops, NumericsError, SplitMix64, Tape, Tensor};
use crate::profile::FeatureNormalizer;
use crate::tokenizer::{encode_pair, TokenizerError, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("non-finite loss at epoch {epoch} batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
}

// ---- metrics -------------------------------------------------------------

/// Percentages; positive class is label 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn compute_metrics(preds: &[u8], labels: &[u8]) -> Metrics {
    assert_eq!(preds.len(), labels.len());
    assert!(!preds.is_empty());
    let (mut tp, mut fp, mut fne, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => tn += 1,
        }
    }
    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let precision = pct(tp, tp + fp);
    let recall = pct(tp, tp + fne);
    Metrics {
        accuracy: pct(tp + tn, preds.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

impl std::fmt::Display for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Acc={:.2} P={:.2} R={:.2} F1={:.2}",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }
}

// ---- optimizer -----------------------------------------------------------

struct AdamEntry {
    name: String,
    tensor: Tensor,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with two learning-rate groups: the encoder core (embeddings and
/// unconditioned transformer weights) at the low rate, everything else —
/// including the profile-modulation maps — at the high rate.
pub struct Adam {
    entries: Vec<AdamEntry>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &CihrModel, lr_core: f64, lr_other: f64, eps: f64) -> Adam {
        let entries = model
            .store
            .iter()
            .map(|(name, t)| AdamEntry {
                name: name.to_string(),
                tensor: t.clone(),
                lr: if is_encoder_core(name) { lr_core } else { lr_other },
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        Adam {
            entries,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }

    pub fn lr_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.lr)
    }

    /// One update from the gradients currently on the parameters.
    /// Parameters that received no gradient this step are left untouched.
    pub fn step(&mut self) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for e in &mut self.entries {
            let Some(grad) = e.tensor.grad() else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    name: e.name.clone(),
                });
            }
            e.tensor.with_values_mut(|vals| {
                for i in 0..vals.len() {
                    let g = grad[i];
                    e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g;
                    e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = e.m[i] / bc1;
                    let v_hat = e.v[i] / bc2;
                    vals[i] -= e.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        Ok(())
    }
}

// ---- input preparation ---------------------------------------------------

/// Tokenize every sample once: perspective views, user posts (with the
/// sample's own text filtered out), static-description text, and the
/// normalized feature vector.
pub fn prepare_inputs(
    ds: &Dataset,
    vocab: &Vocab,
    normalizer: &FeatureNormalizer,
    analyzer: &mut Analyzer,
    cfg: &TrainConfig,
) -> Result<Vec<SampleInput>, TrainError> {
    let mut out = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let perspectives = if cfg.ablation == Ablation::NoHc || cfg.n_a == 1 {
            raw_text_view(vocab, &s.text, cfg.max_len)
        } else {
            let recs = analyzer.analyze_all(&s.text)?;
            build_enhanced_texts(vocab, &s.text, &recs, cfg.n_a, cfg.max_len)?
        };
        let posts = ds
            .posts_for(s, cfg.n_d)
            .iter()
            .map(|p| encode_pair(vocab, p, None, cfg.max_len))
            .collect();
        let user = &ds.users[&s.user_id];
        let profile = user.static_profile();
        out.push(SampleInput {
            perspectives,
            posts,
            static_text: encode_pair(vocab, &user.description, None, cfg.max_len),
            features: normalizer.featurize(&profile),
            label: s.label,
        });
    }
    Ok(out)
}

/// Vocabulary and feature normalizer fitted on the training split only.
pub fn fit_preprocessing(
    ds: &Dataset,
    split: &Split,
    analyzer: &mut Analyzer,
    cfg: &TrainConfig,
) -> Result<(Vocab, FeatureNormalizer), TrainError> {
    let mut corpus = Vec::new();
    let mut train_users = std::collections::BTreeSet::new();
    for &i in &split.train {
        let s = &ds.samples[i];
        corpus.push(s.text.clone());
        if cfg.ablation != Ablation::NoHc && cfg.n_a > 1 {
            for rec in analyzer.analyze_all(&s.text)? {
                corpus.push(rec.analysis);
            }
        }
        train_users.insert(s.user_id.clone());
    }
    let mut profiles = Vec::new();
    for uid in &train_users {
        let u = &ds.users[uid];
        corpus.push(u.description.clone());
        corpus.extend(u.posts.iter().cloned());
        profiles.push(u.static_profile());
    }
    let vocab = Vocab::build(&corpus, cfg.min_freq)?;
    let normalizer = FeatureNormalizer::fit(profiles.iter());
    Ok((vocab, normalizer))
}

pub fn model_dims(cfg: &TrainConfig, vocab: &Vocab, normalizer: &FeatureNormalizer) -> ModelDims {
    ModelDims {
        d: cfg.d,
        k_heads: cfg.k,
        n_layers: cfg.n_layers,
        max_len: cfg.max_len,
        n_d: cfg.n_d,
        ln_eps: cfg.ln_eps,
        vocab_size: vocab.size(),
        feat_width: normalizer.width(),
    }
}

// ---- evaluation ----------------------------------------------------------

pub fn predict_all(
    model: &CihrModel,
    inputs: &[SampleInput],
    idx: &[usize],
) -> Result<Vec<u8>, TrainError> {
    let mut preds = Vec::with_capacity(idx.len());
    for &i in idx {
        let tape = Tape::new();
        let out = model.forward(&tape, &inputs[i])?;
        preds.push(df::argmax_label(&out.probs.to_vec()));
    }
    Ok(preds)
}

pub fn evaluate(
    model: &CihrModel,
    inputs: &[SampleInput],
    idx: &[usize],
) -> Result<Metrics, TrainError> {
    let preds = predict_all(model, inputs, idx)?;
    let labels: Vec<u8> = idx.iter().map(|&i| inputs[i].label).collect();
    Ok(compute_metrics(&preds, &labels))
}

pub fn mean_loss(
    model: &CihrModel,
    inputs: &[SampleInput],
    idx: &[usize],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for &i in idx {
        let tape = Tape::new();
        total += model.sample_loss(&tape, &inputs[i])?.value();
    }
    Ok(total / idx.len().max(1) as f64)
}

// ---- training loop -------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid: Metrics,
    pub stopped_early: bool,
}

/// Train on the train split, tracking the best validation F1; the model is
/// left holding the best-epoch weights. `log` receives one line per epoch.
pub fn train_model(
    model: &CihrModel,
    inputs: &[SampleInput],
    split: &Split,
    cfg: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<TrainReport, TrainError> {
    let mut adam = Adam::new(model, cfg.lr_pretrained_group, cfg.lr_other_group, cfg.adam_eps);
    let mut rng = SplitMix64::new(cfg.seed ^ 0x5eed_ba7c);
    let mut history = Vec::new();
    let mut best: Option<(usize, Metrics, Vec<(String, Vec<usize>, Vec<f64>)>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches(&split.train, cfg.batch_size, &mut rng).iter().enumerate() {
            let tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(model.sample_loss(&tape, &inputs[i])?);
            }
            let total = losses
                .into_iter()
                .reduce(|a, b| ops::add(&tape, &a, &b))
                .expect("non-empty batch");
            let loss = ops::scale(&tape, &total, 1.0 / batch.len() as f64);
            let lv = loss.value();
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += lv * batch.len() as f64;
            seen += batch.len();
            model.store.zero_grads();
            tape.backward(&loss)?;
            adam.step()?;
        }
        let train_loss = epoch_loss / seen.max(1) as f64;
        let valid = evaluate(model, inputs, &split.valid)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            valid,
        });
        log(&format!("epoch {epoch}: train_loss={train_loss:.4} valid {valid}"));
        let better = match &best {
            None => true,
            Some((_, m, _)) => valid.f1 > m.f1,
        };
        if better {
            best = Some((epoch, valid, model.store.snapshot()));
        }
        if let Some(th) = cfg.early_stop_acc {
            if valid.accuracy >= th {
                stopped_early = true;
                log(&format!("early stop: validation accuracy {:.2} >= {th:.2}", valid.accuracy));
                break;
            }
        }
    }

    let (best_epoch, best_valid, snapshot) = best.expect("at least one epoch");
    model.store.restore(&snapshot);
    Ok(TrainReport {
        history,
        best_epoch,
        best_valid,
        stopped_early,
    })
}

/// Everything `train` produces that eval needs later.
pub struct TrainedArtifacts {
    pub model: CihrModel,
    pub vocab: Vocab,
    pub normalizer: FeatureNormalizer,
    pub split: Split,
    pub inputs: Vec<SampleInput>,
    pub report: TrainReport,
}

/// Full pipeline from a raw dataset: fit preprocessing on the train split,
/// tokenize, init, train.
pub fn run_training(
    ds: &Dataset,
    cfg: &TrainConfig,
    analyzer: &mut Analyzer,
    log: impl FnMut(&str),
) -> Result<TrainedArtifacts, TrainError> {
    let split = make_split(ds, cfg.split_mode, cfg.seed);
    let (vocab, normalizer) = fit_preprocessing(ds, &split, analyzer, cfg)?;
    let inputs = prepare_inputs(ds, &vocab, &normalizer, analyzer, cfg)?;
    let model = CihrModel::init(model_dims(cfg, &vocab, &normalizer), cfg.ablation, cfg.seed)?;
    let report = train_model(&model, &inputs, &split, cfg, log)?;
    Ok(TrainedArtifacts {
        model,
        vocab,
        normalizer,
        split,
        inputs,
        report,
    })
}

// ---- gradient verification ----------------------------------------------

/// Build a small full model with randomized parameters and verify the tape
/// gradient of a 2-sample mean loss against central differences over every
/// parameter coordinate. Returns the max relative error.
///
/// Parameters are randomized (instead of keeping the zero-initialized
/// modulation maps) so no analytic gradient sits identically at zero where
/// finite-difference noise would dominate the relative error.
pub fn full_model_gradcheck(seed: u64) -> Result<f64, TrainError> {
    let vocab = Vocab::build(
        &[
            "alpha beta gamma delta epsilon zeta".to_string(),
            "eta theta iota kappa".to_string(),
        ],
        1,
    )?;
    let dims = ModelDims {
        d: 16,
        k_heads: 2,
        n_layers: 2,
        max_len: 8,
        n_d: 2,
        ln_eps: 1e-5,
        vocab_size: vocab.size(),
        feat_width: 4,
    };
    let model = CihrModel::init(dims, Ablation::None, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0x9d5f);
    for (_, t) in model.store.iter() {
        let vals: Vec<f64> = (0..t.numel()).map(|_| rng.next_normal() * 0.1).collect();
        t.set_values(&vals);
    }
    let ep = |x: &str, a: Option<&str>| encode_pair(&vocab, x, a, dims.max_len);
    let mk = |text: &str, label: u8| SampleInput {
        perspectives: vec![
            ep(text, Some("gamma delta")),
            ep(text, Some("kappa zeta")),
            ep(text, None),
        ],
        posts: vec![ep("iota kappa", None), ep("beta", None)],
        static_text: ep("epsilon zeta", None),
        features: vec![0.3, -1.2, 0.7, 0.1],
        label,
    };
    let batch = [mk("alpha beta gamma", 1), mk("eta theta", 0)];
    let loss_fn = |tape: &Tape| {
        let a = model.sample_loss(tape, &batch[0]).unwrap();
        let b = model.sample_loss(tape, &batch[1]).unwrap();
        ops::scale(tape, &ops::add(tape, &a, &b), 0.5)
    };

    model.store.zero_grads();
    let tape = Tape::new();
    tape.backward(&loss_fn(&tape))?;

    // Central differences at step 1e-5 resolve loss changes down to about
    // 1e-11 for a loss of order one; gradients below that are numeric zero.
    // Coordinates the oracle can resolve are held to the relative bound,
    // the rest to a tight absolute one, and a random directional probe per
    // tensor covers their joint contribution.
    let h = crate::numerics::gradcheck::DEFAULT_FD_STEP;
    const RESOLVABLE: f64 = 1e-5;
    const ABS_AS_REL: f64 = 1e-5; // |a-n|/1e-5 < 1e-4  ⇔  |a-n| < 1e-9
    let mut max_err: f64 = 0.0;
    let mut dir_rng = SplitMix64::new(seed ^ 0xd1c7);
    for (_, t) in model.store.iter() {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let orig = t.to_vec();
        let eval_at = |vals: &[f64]| {
            t.set_values(vals);
            let l = loss_fn(&Tape::new()).value();
            t.set_values(&orig);
            l
        };
        for c in 0..orig.len() {
            let mut v = orig.clone();
            v[c] = orig[c] + h;
            let fp = eval_at(&v);
            v[c] = orig[c] - h;
            let fm = eval_at(&v);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[c];
            let err = if a.abs().max(numeric.abs()) >= RESOLVABLE {
                crate::numerics::rel_err(a, numeric)
            } else {
                (a - numeric).abs() / ABS_AS_REL
            };
            max_err = max_err.max(err);
        }
        // directional probe over the whole tensor
        let dir: Vec<f64> = (0..orig.len())
            .map(|_| if dir_rng.coin() { 1.0 } else { -1.0 })
            .collect();
        let analytic_dir: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let plus: Vec<f64> = orig.iter().zip(&dir).map(|(o, d)| o + h * d).collect();
        let minus: Vec<f64> = orig.iter().zip(&dir).map(|(o, d)| o - h * d).collect();
        let numeric_dir = (eval_at(&plus) - eval_at(&minus)) / (2.0 * h);
        if analytic_dir.abs().max(numeric_dir.abs()) >= RESOLVABLE {
            max_err = max_err.max(crate::numerics::rel_err(analytic_dir, numeric_dir));
        }
    }
    model.store.zero_grads();
    Ok(max_err)
}

// ---- checkpoint glue -----------------------------------------------------

pub fn model_header(cfg: &TrainConfig, vocab: &Vocab, normalizer: &FeatureNormalizer) -> String {
    format!(
        "[config]\n{}[normalizer]\nstats = {}\n[meta]\nvocab_hash = {}\nseed = {}\n",
        cfg.to_config_string(),
        normalizer.to_header_string(),
        vocab.table_hash(),
        cfg.seed,
    )
}

pub fn save_model(
    path: &Path,
    model: &CihrModel,
    cfg: &TrainConfig,
    vocab: &Vocab,
    normalizer: &FeatureNormalizer,
) -> Result<(), TrainError> {
    let mut tensors = std::collections::BTreeMap::new();
    for (name, shape, values) in model.store.snapshot() {
        tensors.insert(name, NamedTensor { shape, values });
    }
    Checkpoint {
        header: model_header(cfg, vocab, normalizer),
        tensors,
    }
    .save(path)?;
    Ok(())
}

/// Rebuild a model from a checkpoint. The supplied vocabulary must hash to
/// the value recorded at save time.
pub fn load_model(
    path: &Path,
    vocab: &Vocab,
) -> Result<(CihrModel, TrainConfig, FeatureNormalizer), TrainError> {
    let ck = Checkpoint::load(path)?;
    let miss = |what: &str| TrainError::CheckpointMismatch(format!("header lacks {what}"));
    let stored_hash = header_lookup(&ck.header, "meta", "vocab_hash").ok_or_else(|| miss("vocab_hash"))?;
    if stored_hash != vocab.table_hash() {
        return Err(TrainError::CheckpointMismatch(format!(
            "vocabulary hash {} does not match checkpoint {}",
            vocab.table_hash(),
            stored_hash
        )));
    }
    let config_text: String = {
        let mut lines = Vec::new();
        let mut in_section = false;
        for line in ck.header.lines() {
            if let Some(name) = line.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                in_section = name == "config";
                continue;
            }
            if in_section {
                lines.push(line);
            }
        }
        lines.join("\n")
    };
    let cfg = TrainConfig::parse(&config_text)?;
    let norm_text = header_lookup(&ck.header, "normalizer", "stats").ok_or_else(|| miss("normalizer stats"))?;
    let normalizer = FeatureNormalizer::from_header_string(&norm_text)
        .ok_or_else(|| TrainError::CheckpointMismatch("unparseable normalizer stats".into()))?;
    let model = CihrModel::init(model_dims(&cfg, vocab, &normalizer), cfg.ablation, cfg.seed)?;
    if model.store.len() != ck.tensors.len() {
        return Err(TrainError::CheckpointMismatch(format!(
            "parameter count {} does not match checkpoint {}",
            model.store.len(),
            ck.tensors.len()
        )));
    }
    for (name, _, _) in model.store.snapshot() {
        let t = ck
            .tensors
            .get(&name)
            .ok_or_else(|| TrainError::CheckpointMismatch(format!("missing tensor {name}")))?;
        let live = model.store.get(&name).unwrap();
        if live.shape() != t.shape {
            return Err(TrainError::CheckpointMismatch(format!(
                "shape of {name} is {:?}, checkpoint has {:?}",
                live.shape(),
                t.shape
            )));
        }
        live.set_values(&t.values);
    }
    Ok((model, cfg, normalizer))
}
