//! Full model assembly: profile encoding, the shared profile-guided
//! encoder stack, dynamic fusion and the classifier, plus the ablation
//! variants used by the evaluation harness.

pub mod df;
pub mod params;
pub mod sf;

use crate::numerics::{ops, SplitMix64, Tape, Tensor};
use crate::tokenizer::{EmbeddingTables, TokenSequence};

pub use df::{ClassifierParams, DfParams};
pub use params::ParamStore;
pub use sf::{ModelError, SfStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Single raw-text view instead of the perspective analyses.
    NoHc,
    /// Profile embedding pinned to zero and the dynamic path removed.
    NoSi,
    /// Unconditioned encoder: profile embedding pinned to zero.
    NoSf,
    /// Concatenation + single affine layer instead of gated fusion.
    NoDf,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Ablation> {
        Some(match s {
            "none" => Ablation::None,
            "no-hc" => Ablation::NoHc,
            "no-si" => Ablation::NoSi,
            "no-sf" => Ablation::NoSf,
            "no-df" => Ablation::NoDf,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoHc => "no-hc",
            Ablation::NoSi => "no-si",
            Ablation::NoSf => "no-sf",
            Ablation::NoDf => "no-df",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelDims {
    pub d: usize,
    pub k_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub n_d: usize,
    pub ln_eps: f64,
    pub vocab_size: usize,
    pub feat_width: usize,
}

/// Prepared inputs for one sample: already-tokenized sequences plus the
/// normalized static feature vector.
#[derive(Clone, Debug)]
pub struct SampleInput {
    pub perspectives: Vec<TokenSequence>,
    pub posts: Vec<TokenSequence>,
    pub static_text: TokenSequence,
    pub features: Vec<f64>,
    pub label: u8,
}

pub struct ForwardOutput {
    pub probs: Tensor,
    pub alpha: Option<Tensor>,
}

pub struct CihrModel {
    pub store: ParamStore,
    pub tables: EmbeddingTables,
    pub stack: SfStack,
    pub static_w: Tensor, // W_s [d''×d'']
    pub static_b: Tensor,
    pub fuse_w: Tensor, // W_z [(d+d'')×d], zero-initialized
    pub fuse_b: Tensor,
    pub df: DfParams,
    pub clf: ClassifierParams,
    pub df_surrogate: Option<(Tensor, Tensor)>, // [2d×2], [2]
    pub dims: ModelDims,
    pub ablation: Ablation,
}

impl CihrModel {
    pub fn init(dims: ModelDims, ablation: Ablation, seed: u64) -> Result<CihrModel, ModelError> {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let tables = {
            let mut t = EmbeddingTables::init(dims.vocab_size, dims.max_len, dims.d, &mut rng);
            t.word = store.register("encoder.embed.word", t.word);
            t.position = store.register("encoder.embed.position", t.position);
            t.segment = store.register("encoder.embed.segment", t.segment);
            t
        };
        let stack = SfStack::init(
            &mut store,
            dims.n_layers,
            dims.d,
            dims.k_heads,
            dims.ln_eps,
            &mut rng,
        )?;
        let w = dims.feat_width;
        let static_w = store.register("profile.static.w", params::init_normal(vec![w, w], &mut rng));
        let static_b = store.register("profile.static.b", params::init_zeros(vec![w]));
        // zero-init keeps e^z exactly zero at a fresh initialization
        let fuse_w = store.register("profile.fuse.w", params::init_zeros(vec![dims.d + w, dims.d]));
        let fuse_b = store.register("profile.fuse.b", params::init_zeros(vec![dims.d]));
        let df = DfParams::init(&mut store, dims.d, dims.k_heads, &mut rng)?;
        let clf = ClassifierParams::init(&mut store, dims.d, &mut rng);
        let df_surrogate = if ablation == Ablation::NoDf {
            Some((
                store.register(
                    "ablation.df_surrogate.w",
                    params::init_normal(vec![2 * dims.d, 2], &mut rng),
                ),
                store.register("ablation.df_surrogate.b", params::init_zeros(vec![2])),
            ))
        } else {
            None
        };
        Ok(CihrModel {
            store,
            tables,
            stack,
            static_w,
            static_b,
            fuse_w,
            fuse_b,
            df,
            clf,
            df_surrogate,
            dims,
            ablation,
        })
    }

    /// Encode the static-description text with the shared stack, profile
    /// embedding forced to zero, CLS pooling.
    pub fn encode_static_text(
        &self,
        tape: &Tape,
        seq: &TokenSequence,
    ) -> Result<Tensor, ModelError> {
        let zero = Tensor::zeros(vec![self.dims.d]);
        let h = sf::sf_encode(tape, seq, &self.tables, &zero, &self.stack)?;
        Ok(sf::cls_pool(tape, &h))
    }

    /// Affine embedding of the normalized non-textual features.
    pub fn embed_nontextual(&self, tape: &Tape, features: &[f64]) -> Result<Tensor, ModelError> {
        assert_eq!(features.len(), self.dims.feat_width, "feature width drift");
        let x = Tensor::from_vec(vec![features.len()], features.to_vec());
        Ok(ops::linear_vec(tape, &x, &self.static_w, &self.static_b)?)
    }

    /// e^z = (Z' ‖ Z'') W_z + b_z.
    pub fn fuse_static(
        &self,
        tape: &Tape,
        z_text: &Tensor,
        z_feat: &Tensor,
    ) -> Result<Tensor, ModelError> {
        let cat = ops::concat_lastdim(tape, z_text, z_feat);
        Ok(ops::linear_vec(tape, &cat, &self.fuse_w, &self.fuse_b)?)
    }

    /// Full static-profile embedding for one sample; zero for the profile-
    /// free ablations.
    pub fn profile_embedding(
        &self,
        tape: &Tape,
        input: &SampleInput,
    ) -> Result<Tensor, ModelError> {
        match self.ablation {
            Ablation::NoSi | Ablation::NoSf => Ok(Tensor::zeros(vec![self.dims.d])),
            _ => {
                let z_text = self.encode_static_text(tape, &input.static_text)?;
                let z_feat = self.embed_nontextual(tape, &input.features)?;
                self.fuse_static(tape, &z_text, &z_feat)
            }
        }
    }

    pub fn forward(&self, tape: &Tape, input: &SampleInput) -> Result<ForwardOutput, ModelError> {
        let e_z = self.profile_embedding(tape, input)?;
        let h_a = sf::encode_perspectives(tape, &input.perspectives, &self.tables, &e_z, &self.stack)?;

        if self.ablation == Ablation::NoSi {
            // commonality path only
            let h_x = ops::mean_axis(tape, &h_a, 0);
            let probs = df::predict(tape, &h_x, &self.clf)?;
            return Ok(ForwardOutput { probs, alpha: None });
        }

        let (h_d, d_mask) = sf::encode_dynamic_profile(
            tape,
            &input.posts,
            self.dims.n_d,
            &self.tables,
            &e_z,
            &self.stack,
        )?;

        if let Some((w, b)) = &self.df_surrogate {
            // concatenation surrogate: [mean h_a ‖ mean h_d] → affine → softmax
            let h_x = ops::mean_axis(tape, &h_a, 0);
            let d_pool = ops::mean_axis(tape, &h_d, 0);
            let cat = ops::concat_lastdim(tape, &h_x, &d_pool);
            let logits = ops::linear_vec(tape, &cat, w, b)?;
            let probs = ops::softmax_lastdim(tape, &logits);
            return Ok(ForwardOutput { probs, alpha: None });
        }

        let h_p = df::mha_cross(tape, &h_a, &h_d, &d_mask, &self.df)?;
        let (h_o, alpha) = df::gated_fuse(tape, &h_a, &h_p, &self.df)?;
        let probs = df::predict(tape, &h_o, &self.clf)?;
        Ok(ForwardOutput {
            probs,
            alpha: Some(alpha),
        })
    }

    /// Scalar loss for one sample (negated cross-entropy).
    pub fn sample_loss(&self, tape: &Tape, input: &SampleInput) -> Result<Tensor, ModelError> {
        let out = self.forward(tape, input)?;
        Ok(df::cross_entropy_sample(tape, &out.probs, input.label))
    }
}

/// Learning-rate grouping: the encoder stack and embeddings form the
/// pretrained-style group; profile-modulation maps and everything outside
/// the encoder use the higher rate.
pub fn is_encoder_core(name: &str) -> bool {
    name.starts_with("encoder.")
        && !name.contains(".sigma.")
        && !name.contains(".mu.")
        && !name.contains(".gain.")
        && !name.contains(".bias.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{encode_pair, Vocab};

    fn tiny_vocab() -> Vocab {
        Vocab::build(&["alpha beta gamma delta".to_string()], 1).unwrap()
    }

    fn dims(vocab: &Vocab, feat_width: usize) -> ModelDims {
        ModelDims {
            d: 8,
            k_heads: 2,
            n_layers: 2,
            max_len: 8,
            n_d: 2,
            ln_eps: 1e-5,
            vocab_size: vocab.size(),
            feat_width,
        }
    }

    fn input(vocab: &Vocab, features: Vec<f64>) -> SampleInput {
        let l = 8;
        SampleInput {
            perspectives: vec![
                encode_pair(vocab, "alpha beta", Some("gamma"), l),
                encode_pair(vocab, "alpha beta", None, l),
            ],
            posts: vec![encode_pair(vocab, "delta", None, l)],
            static_text: encode_pair(vocab, "gamma delta", None, l),
            features,
            label: 1,
        }
    }

    #[test]
    fn fresh_init_profile_embedding_is_zero() {
        let vocab = tiny_vocab();
        let model = CihrModel::init(dims(&vocab, 4), Ablation::None, 7).unwrap();
        let tape = Tape::new();
        let e_z = model
            .profile_embedding(&tape, &input(&vocab, vec![1.0, 0.5, -2.0, 3.0]))
            .unwrap();
        assert!(e_z.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_inertness_across_static_profiles() {
        let vocab = tiny_vocab();
        let model = CihrModel::init(dims(&vocab, 4), Ablation::None, 7).unwrap();
        let tape = Tape::new();
        let mut a = input(&vocab, vec![1.0, 0.0, 0.0, 0.0]);
        let mut b = input(&vocab, vec![0.0, 1.0, 7.0, -3.0]);
        b.static_text = encode_pair(&vocab, "beta", None, 8);
        a.label = 1;
        b.label = 1;
        let pa = model.forward(&tape, &a).unwrap().probs.to_vec();
        let pb = model.forward(&tape, &b).unwrap().probs.to_vec();
        for j in 0..2 {
            assert!((pa[j] - pb[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn fuse_static_linearity() {
        // fuse(2a) − 2·fuse(a) = −b_z
        let vocab = tiny_vocab();
        let model = CihrModel::init(dims(&vocab, 4), Ablation::None, 3).unwrap();
        let mut rng = SplitMix64::new(12);
        let wvals: Vec<f64> = (0..(8 + 4) * 8).map(|_| rng.next_normal()).collect();
        model.fuse_w.set_values(&wvals);
        let bvals: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
        model.fuse_b.set_values(&bvals);
        let tape = Tape::new();
        let zt = Tensor::from_vec(vec![8], (0..8).map(|_| rng.next_normal()).collect());
        let zf = Tensor::from_vec(vec![4], (0..4).map(|_| rng.next_normal()).collect());
        let f1 = model.fuse_static(&tape, &zt, &zf).unwrap().to_vec();
        let zt2 = ops::scale(&tape, &zt, 2.0);
        let zf2 = ops::scale(&tape, &zf, 2.0);
        let f2 = model.fuse_static(&tape, &zt2, &zf2).unwrap().to_vec();
        for j in 0..8 {
            assert!((f2[j] - 2.0 * f1[j] + bvals[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_static_hand_case() {
        let vocab = tiny_vocab();
        let mut d = dims(&vocab, 2);
        d.d = 8; // model width fixed by stack; use block-selecting W_z
        let model = CihrModel::init(d, Ablation::None, 4).unwrap();
        // W_z selects z_text (first d rows identity)
        let dw = 8 + 2;
        let mut w = vec![0.0; dw * 8];
        for i in 0..8 {
            w[i * 8 + i] = 1.0;
        }
        model.fuse_w.set_values(&w);
        let tape = Tape::new();
        let zt = Tensor::from_vec(vec![8], (0..8).map(|i| i as f64).collect());
        let zf = Tensor::from_vec(vec![2], vec![9.0, 9.0]);
        let f = model.fuse_static(&tape, &zt, &zf).unwrap().to_vec();
        assert_eq!(f, (0..8).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn static_text_encoding_deterministic() {
        let vocab = tiny_vocab();
        let model = CihrModel::init(dims(&vocab, 4), Ablation::None, 9).unwrap();
        let tape = Tape::new();
        let seq = encode_pair(&vocab, "alpha", None, 8);
        let a = model.encode_static_text(&tape, &seq).unwrap().to_vec();
        let b = model.encode_static_text(&tape, &seq).unwrap().to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_perturbation_leaves_logits_unchanged() {
        let vocab = tiny_vocab();
        let model = CihrModel::init(dims(&vocab, 4), Ablation::None, 21).unwrap();
        let tape = Tape::new();
        let inp = input(&vocab, vec![0.0; 4]);
        let before = model.forward(&tape, &inp).unwrap().probs.to_vec();
        // perturb the [PAD] word-embedding row
        let mut w = model.tables.word.to_vec();
        let d = 8;
        for j in 0..d {
            w[j] += 123.456; // PAD id is 0 → first row
        }
        model.tables.word.set_values(&w);
        let after = model.forward(&tape, &inp).unwrap().probs.to_vec();
        for j in 0..2 {
            assert!((before[j] - after[j]).abs() <= 1e-10, "{before:?} {after:?}");
        }
    }

    #[test]
    fn encoder_core_grouping() {
        assert!(is_encoder_core("encoder.embed.word"));
        assert!(is_encoder_core("encoder.layer.0.attn.head.1.q.w"));
        assert!(is_encoder_core("encoder.layer.0.ln1.gamma"));
        assert!(is_encoder_core("encoder.layer.1.ffn.b1"));
        assert!(!is_encoder_core("encoder.layer.0.attn.head.0.sigma.b"));
        assert!(!is_encoder_core("encoder.layer.0.attn.head.0.mu.w"));
        assert!(!is_encoder_core("encoder.layer.0.ln1.gain.w"));
        assert!(!is_encoder_core("encoder.layer.0.ln2.bias.b"));
        assert!(!is_encoder_core("df.gate.w"));
        assert!(!is_encoder_core("classifier.w"));
        assert!(!is_encoder_core("profile.fuse.w"));
    }
}
