//! The hypernetwork: encodes a task description into a latent vector h0,
//! then one small two-layer decoder per main-network layer maps h0 to that
//! layer's flat adapter parameter vector phi, which is sliced and reshaped
//! into [`AdapterParams`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{encoder_layer, AdapterParams, AdapterSet, AdapterVars, ModelConfig, Vocab};
use crate::numerics::{Graph, NumericsError, ParamStore, Rng, Scalar, Tensor1, Tensor2, Var};

#[derive(Debug, Error)]
pub enum HypernetError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config: {0}")]
    Config(String),
    #[error("description is empty after tokenization")]
    EmptyDescription,
    #[error("layer index {index} out of range for {n_layers} layers")]
    LayerOutOfRange { index: usize, n_layers: usize },
    #[error("phi has length {got}, expected {expected} for h={h} a={a}")]
    PhiLength { got: usize, expected: usize, h: usize, a: usize },
}

pub type Result<T, E = HypernetError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Description-embedding width (length of h0).
    pub e: usize,
    /// Decoder hidden width.
    pub m: usize,
    /// Heads in the description encoder's single transformer layer.
    pub enc_heads: usize,
    /// Adapter slots in the paired main network (encoder + decoder layers).
    pub n_layers: usize,
    /// Copied from the paired [`ModelConfig`].
    pub h: usize,
    pub adapter_width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Zero the decoders' final layers so generated adapters start as exact
    /// identities.
    #[serde(default = "default_true")]
    pub zero_final_init: bool,
}

impl HyperConfig {
    pub fn for_model(mc: &ModelConfig, e: usize, m: usize) -> Self {
        HyperConfig {
            e,
            m,
            enc_heads: 4,
            n_layers: mc.n_layers(),
            h: mc.h,
            adapter_width: mc.adapter_width,
            vocab_size: mc.vocab_size,
            max_len: mc.max_len,
            zero_final_init: true,
        }
    }

    /// Desk defaults: e=32, m=64.
    pub fn desk(mc: &ModelConfig) -> Self {
        Self::for_model(mc, 32, 64)
    }

    /// Gradient-checker scale: e=8, m=8.
    pub fn tiny(mc: &ModelConfig) -> Self {
        Self::for_model(mc, 8, 8)
    }

    /// Flat adapter size per layer: 2*h*a + a + h.
    pub fn p(&self) -> usize {
        2 * self.h * self.adapter_width + self.adapter_width + self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.e == 0 || self.enc_heads == 0 || self.e % self.enc_heads != 0 {
            return Err(HypernetError::Config(format!(
                "enc_heads ({}) must divide e ({})",
                self.enc_heads, self.e
            )));
        }
        if self.m == 0 {
            return Err(HypernetError::Config("m must be >= 1".into()));
        }
        if self.n_layers == 0 {
            return Err(HypernetError::Config("n_layers must be >= 1".into()));
        }
        if self.h == 0 || self.adapter_width == 0 {
            return Err(HypernetError::Config("h and adapter_width must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(HypernetError::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }

    /// Errors unless this hypernetwork generates adapters that fit `mc`.
    pub fn check_compatible(&self, mc: &ModelConfig) -> Result<()> {
        let pairs = [
            ("n_layers", self.n_layers, mc.n_layers()),
            ("h", self.h, mc.h),
            ("adapter_width", self.adapter_width, mc.adapter_width),
            ("vocab_size", self.vocab_size, mc.vocab_size),
            ("max_len", self.max_len, mc.max_len),
        ];
        for (name, ours, theirs) in pairs {
            if ours != theirs {
                return Err(HypernetError::Config(format!(
                    "{name} mismatch: hypernetwork {ours}, main network {theirs}"
                )));
            }
        }
        Ok(())
    }

    /// Parameter count closed form. The description encoder (embedding
    /// tables + one transformer layer with FFN width 2e) costs
    /// (V + L)*e + 8e^2 + 7e; each of the n per-layer decoders costs
    /// m*e + m + p*m + p.
    pub fn param_count(&self) -> usize {
        let e = self.e;
        let encoder = (self.vocab_size + self.max_len) * e + 8 * e * e + 7 * e;
        let decoder = self.m * e + self.m + self.p() * self.m + self.p();
        encoder + self.n_layers * decoder
    }
}

/// Slices a flat phi vector into adapter parameters. Fixed layout: W_down
/// (h*a values, row-major), b_down (a), W_up (a*h, row-major), b_up (h).
pub fn slice_reshape<T: Scalar>(phi: &[T], h: usize, a: usize) -> Result<AdapterParams<T>> {
    let expected = 2 * h * a + a + h;
    if phi.len() != expected {
        return Err(HypernetError::PhiLength { got: phi.len(), expected, h, a });
    }
    let mut at = 0;
    let mut take = |n: usize| {
        let s = &phi[at..at + n];
        at += n;
        s.to_vec()
    };
    Ok(AdapterParams {
        w_down: Tensor2::from_vec(h, a, take(h * a))?,
        b_down: Tensor2::from_vec(1, a, take(a))?,
        w_up: Tensor2::from_vec(a, h, take(a * h))?,
        b_up: Tensor2::from_vec(1, h, take(h))?,
    })
}

/// Inverse of [`slice_reshape`]: concatenates the four tensors back into a
/// flat vector in the same fixed layout.
pub fn flatten_adapter<T: Scalar>(p: &AdapterParams<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(
        p.w_down.len() + p.b_down.len() + p.w_up.len() + p.b_up.len(),
    );
    out.extend_from_slice(p.w_down.data());
    out.extend_from_slice(p.b_down.data());
    out.extend_from_slice(p.w_up.data());
    out.extend_from_slice(p.b_up.data());
    out
}

/// Description encoder plus per-layer decoders, all in one parameter store
/// under the "hyper." prefix.
#[derive(Debug, Clone)]
pub struct Hypernetwork<T: Scalar> {
    pub config: HyperConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Hypernetwork<T> {
    /// Fresh hypernetwork: Xavier-uniform encoder and first decoder layers;
    /// final decoder layers (W2, b2) start at zero when `zero_final_init`.
    pub fn init(config: HyperConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).subrng("init/hyper");
        let e = config.e;
        let fe = 2 * e;
        let p_len = config.p();
        let mut p = ParamStore::new();
        let xavier = crate::model::xavier::<T>;
        p.insert_matrix("hyper.tok_emb", xavier(&mut rng, config.vocab_size, e))?;
        p.insert_matrix("hyper.pos_emb", xavier(&mut rng, config.max_len, e))?;
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert_matrix(&format!("hyper.enc.attn.{w}"), xavier(&mut rng, e, e))?;
        }
        p.insert_vector("hyper.enc.ln1.g", crate::model::ones_row(e))?;
        p.insert_vector("hyper.enc.ln1.b", Tensor2::zeros(1, e))?;
        p.insert_matrix("hyper.enc.ffn.w1", xavier(&mut rng, e, fe))?;
        p.insert_vector("hyper.enc.ffn.b1", Tensor2::zeros(1, fe))?;
        p.insert_matrix("hyper.enc.ffn.w2", xavier(&mut rng, fe, e))?;
        p.insert_vector("hyper.enc.ffn.b2", Tensor2::zeros(1, e))?;
        p.insert_vector("hyper.enc.ln2.g", crate::model::ones_row(e))?;
        p.insert_vector("hyper.enc.ln2.b", Tensor2::zeros(1, e))?;
        for i in 0..config.n_layers {
            p.insert_matrix(&format!("hyper.dec.l{i}.w1"), xavier(&mut rng, config.m, e))?;
            p.insert_vector(&format!("hyper.dec.l{i}.b1"), Tensor2::zeros(1, config.m))?;
            let w2 = if config.zero_final_init {
                Tensor2::zeros(p_len, config.m)
            } else {
                xavier(&mut rng, p_len, config.m)
            };
            p.insert_matrix(&format!("hyper.dec.l{i}.w2"), w2)?;
            p.insert_vector(&format!("hyper.dec.l{i}.b2"), Tensor2::zeros(1, p_len))?;
        }
        debug_assert_eq!(p.total_params(), config.param_count());
        Ok(Hypernetwork { config, params: p })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Latent description representation on the tape: embed, one encoder
    /// layer, mean-pool over positions. Output is 1 x e.
    pub fn build_h0(&self, g: &mut Graph<T>, desc_ids: &[usize]) -> Result<Var> {
        if desc_ids.is_empty() {
            return Err(HypernetError::EmptyDescription);
        }
        let ids: &[usize] = if desc_ids.len() > self.config.max_len {
            &desc_ids[..self.config.max_len]
        } else {
            desc_ids
        };
        let tok = g.param(&self.params, "hyper.tok_emb")?;
        let pos = g.param(&self.params, "hyper.pos_emb")?;
        let te = g.embed(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = g.embed(pos, &positions)?;
        let x = g.add(te, pe)?;
        let x = encoder_layer(g, &self.params, "hyper.enc", x, self.config.enc_heads, None)?;
        Ok(g.mean_rows(x)?)
    }

    /// One decoder on the tape: phi_i = W2 * ReLU(W1 h0 + b1) + b2,
    /// returned as a 1 x p row. `layer` is 0-based.
    pub fn build_phi(&self, g: &mut Graph<T>, h0: Var, layer: usize) -> Result<Var> {
        if layer >= self.config.n_layers {
            return Err(HypernetError::LayerOutOfRange {
                index: layer,
                n_layers: self.config.n_layers,
            });
        }
        let w1 = g.param(&self.params, &format!("hyper.dec.l{layer}.w1"))?;
        let b1 = g.param(&self.params, &format!("hyper.dec.l{layer}.b1"))?;
        let w2 = g.param(&self.params, &format!("hyper.dec.l{layer}.w2"))?;
        let b2 = g.param(&self.params, &format!("hyper.dec.l{layer}.b2"))?;
        // Weights are stored in the (output x input) orientation, so the
        // row-vector h0 multiplies their transposes.
        let w1t = g.transpose(w1)?;
        let h1 = g.matmul(h0, w1t)?;
        let h1 = g.add_row(h1, b1)?;
        let h1 = g.relu(h1)?;
        let w2t = g.transpose(w2)?;
        let phi = g.matmul(h1, w2t)?;
        Ok(g.add_row(phi, b2)?)
    }

    /// Slices a 1 x p phi node into the four adapter tensors on the tape,
    /// mirroring [`slice_reshape`] exactly.
    pub fn build_adapter_vars(&self, g: &mut Graph<T>, phi: Var) -> Result<AdapterVars> {
        let h = self.config.h;
        let a = self.config.adapter_width;
        let mut at = 0;
        let mut next = |g: &mut Graph<T>, n: usize| -> crate::numerics::Result<Var> {
            let s = g.slice_cols(phi, at, at + n);
            at += n;
            s
        };
        let w_down_flat = next(g, h * a)?;
        let w_down = g.reshape(w_down_flat, h, a)?;
        let b_down = next(g, a)?;
        let w_up_flat = next(g, a * h)?;
        let w_up = g.reshape(w_up_flat, a, h)?;
        let b_up = next(g, h)?;
        Ok(AdapterVars { w_down, b_down, w_up, b_up })
    }

    /// Full generation pass on the tape: h0, then one adapter per layer.
    /// Stage-2 training runs this and feeds the result straight into the
    /// main network's forward pass, so gradients reach every hypernetwork
    /// parameter.
    pub fn build_adapters(&self, g: &mut Graph<T>, desc_ids: &[usize]) -> Result<Vec<AdapterVars>> {
        let h0 = self.build_h0(g, desc_ids)?;
        (0..self.config.n_layers)
            .map(|i| {
                let phi = self.build_phi(g, h0, i)?;
                self.build_adapter_vars(g, phi)
            })
            .collect()
    }

    /// h0 as a plain vector.
    pub fn encode_description(&self, vocab: &Vocab, description: &str) -> Result<Tensor1<T>> {
        let ids = vocab.tokenize(description);
        let mut g = Graph::new();
        let h0 = self.build_h0(&mut g, &ids)?;
        Ok(g.value(h0).to_tensor1())
    }

    /// phi_i for an explicit h0, as a flat vector. `layer` is 0-based.
    pub fn decode_layer(&self, h0: &Tensor1<T>, layer: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let h0 = g.input(h0.to_row());
        let phi = self.build_phi(&mut g, h0, layer)?;
        Ok(g.value(phi).data().to_vec())
    }

    /// Materialized adapters for a description: the same computation as
    /// [`Hypernetwork::build_adapters`], with values extracted from the
    /// tape so both paths agree bit for bit.
    pub fn generate_adapters(&self, vocab: &Vocab, description: &str) -> Result<AdapterSet<T>> {
        let ids = vocab.tokenize(description);
        let mut g = Graph::new();
        let vars = self.build_adapters(&mut g, &ids)?;
        Ok(AdapterSet(
            vars.iter()
                .map(|v| AdapterParams {
                    w_down: g.value(v.w_down).clone(),
                    b_down: g.value(v.b_down).clone(),
                    w_up: g.value(v.w_up).clone(),
                    b_up: g.value(v.b_up).clone(),
                })
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MainNetwork, BOS_ID, EOS_ID, SEP_ID};
    use crate::numerics::grad_check;
    use proptest::prelude::*;

    fn sample_vocab() -> Vocab {
        Vocab::from_corpus(
            ["return word number one two of the input", "output yes if contains alpha beta"],
            1,
            None,
        )
    }

    fn tiny_pair(seed: u64, zero_init: bool) -> (MainNetwork<f64>, Hypernetwork<f64>) {
        let vocab = sample_vocab();
        let mc = ModelConfig::tiny(vocab.len());
        let mut hc = HyperConfig::tiny(&mc);
        hc.zero_final_init = zero_init;
        let net = MainNetwork::init(mc, seed).unwrap();
        let hn = Hypernetwork::init(hc, seed + 1).unwrap();
        (net, hn)
    }

    #[test]
    fn param_count_matches_closed_form() {
        let (_, hn) = tiny_pair(0, true);
        assert_eq!(hn.params.total_params(), hn.config.param_count());
    }

    #[test]
    fn p_for_h8_a2_is_42() {
        let (_, hn) = tiny_pair(1, true);
        assert_eq!((hn.config.h, hn.config.adapter_width), (8, 2));
        assert_eq!(hn.config.p(), 42);
    }

    #[test]
    fn h0_is_deterministic_and_description_dependent() {
        let vocab = sample_vocab();
        let (_, hn) = tiny_pair(2, true);
        let a = hn.encode_description(&vocab, "return word number one").unwrap();
        let b = hn.encode_description(&vocab, "return word number one").unwrap();
        let c = hn.encode_description(&vocab, "output yes if contains alpha").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), hn.config.e);
        let single = hn.encode_description(&vocab, "input").unwrap();
        assert_eq!(single.len(), hn.config.e);
    }

    #[test]
    fn empty_description_is_an_error() {
        let vocab = sample_vocab();
        let (_, hn) = tiny_pair(3, true);
        assert!(matches!(
            hn.encode_description(&vocab, "   "),
            Err(HypernetError::EmptyDescription)
        ));
        assert!(matches!(
            hn.generate_adapters(&vocab, ""),
            Err(HypernetError::EmptyDescription)
        ));
    }

    #[test]
    fn zero_final_init_yields_zero_adapters() {
        let vocab = sample_vocab();
        let (_, hn) = tiny_pair(4, true);
        let h0 = hn.encode_description(&vocab, "return word number two").unwrap();
        for layer in 0..hn.config.n_layers {
            let phi = hn.decode_layer(&h0, layer).unwrap();
            assert_eq!(phi.len(), hn.config.p());
            assert!(phi.iter().all(|&v| v == 0.0));
        }
        let set = hn.generate_adapters(&vocab, "return word number two").unwrap();
        assert_eq!(set.len(), hn.config.n_layers);
        assert!(set.0.iter().all(AdapterParams::is_zero));
    }

    #[test]
    fn identity_at_birth_end_to_end() {
        let vocab = sample_vocab();
        let (net, hn) = tiny_pair(5, true);
        let set = hn.generate_adapters(&vocab, "return word number one").unwrap();
        let src = [BOS_ID, 6, 7, SEP_ID, 8, 9, EOS_ID];
        let dec = [BOS_ID, 10, 11];
        let plain = net.full_logits(None, &src, &dec).unwrap();
        let adapted = net.full_logits(Some(&set), &src, &dec).unwrap();
        assert_eq!(plain, adapted, "zero adapters must not move any logit");
    }

    #[test]
    fn random_final_init_changes_the_model() {
        let vocab = sample_vocab();
        let (net, hn) = tiny_pair(6, false);
        let set = hn.generate_adapters(&vocab, "return word number one").unwrap();
        let src = [BOS_ID, 6, 7, SEP_ID, 8, EOS_ID];
        let dec = [BOS_ID, 10];
        let plain = net.full_logits(None, &src, &dec).unwrap();
        let adapted = net.full_logits(Some(&set), &src, &dec).unwrap();
        assert_ne!(plain, adapted);
    }

    #[test]
    fn generated_adapters_are_deterministic() {
        let vocab = sample_vocab();
        let (_, hn) = tiny_pair(7, false);
        let a = hn.generate_adapters(&vocab, "output yes if contains beta").unwrap();
        let b = hn.generate_adapters(&vocab, "output yes if contains beta").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_layer_out_of_range() {
        let (_, hn) = tiny_pair(8, true);
        let h0 = Tensor1::from_vec(vec![0.1; hn.config.e]);
        let err = hn.decode_layer(&h0, hn.config.n_layers).unwrap_err();
        assert!(matches!(err, HypernetError::LayerOutOfRange { .. }));
    }

    #[test]
    fn slice_reshape_hand_example() {
        let phi: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let p = slice_reshape(&phi, 2, 1).unwrap();
        assert_eq!(p.w_down.shape(), (2, 1));
        assert_eq!(p.w_down.data(), &[1.0, 2.0]);
        assert_eq!(p.b_down.data(), &[3.0]);
        assert_eq!(p.w_up.shape(), (1, 2));
        assert_eq!(p.w_up.data(), &[4.0, 5.0]);
        assert_eq!(p.b_up.data(), &[6.0, 7.0]);
        assert_eq!(flatten_adapter(&p), phi);
    }

    #[test]
    fn slice_reshape_rejects_wrong_length() {
        let phi = vec![0.0f64; 10];
        assert!(matches!(
            slice_reshape(&phi, 2, 1),
            Err(HypernetError::PhiLength { got: 10, expected: 7, .. })
        ));
    }

    #[test]
    fn graph_slicing_matches_slice_reshape() {
        let vocab = sample_vocab();
        let (_, hn) = tiny_pair(9, false);
        let ids = vocab.tokenize("return word number two");
        let mut g = Graph::new();
        let h0 = hn.build_h0(&mut g, &ids).unwrap();
        let phi = hn.build_phi(&mut g, h0, 0).unwrap();
        let vars = hn.build_adapter_vars(&mut g, phi).unwrap();
        let direct =
            slice_reshape(g.value(phi).data(), hn.config.h, hn.config.adapter_width).unwrap();
        assert_eq!(*g.value(vars.w_down), direct.w_down);
        assert_eq!(*g.value(vars.b_down), direct.b_down);
        assert_eq!(*g.value(vars.w_up), direct.w_up);
        assert_eq!(*g.value(vars.b_up), direct.b_up);
    }

    #[test]
    fn config_compatibility_checks() {
        let vocab = sample_vocab();
        let mc = ModelConfig::tiny(vocab.len());
        let hc = HyperConfig::tiny(&mc);
        assert!(hc.check_compatible(&mc).is_ok());
        let mut other = mc.clone();
        other.adapter_width += 1;
        assert!(hc.check_compatible(&other).is_err());
        let mut bad = hc;
        bad.e = 9;
        assert!(bad.validate().is_err(), "enc_heads must divide e");
    }

    #[test]
    fn different_seeds_differ() {
        let (_, h1) = tiny_pair(10, true);
        let vocab = sample_vocab();
        let mc = ModelConfig::tiny(vocab.len());
        let h2 = Hypernetwork::<f64>::init(HyperConfig::tiny(&mc), 99).unwrap();
        assert_ne!(
            h1.params.value("hyper.dec.l0.w1").unwrap(),
            h2.params.value("hyper.dec.l0.w1").unwrap()
        );
    }

    #[test]
    fn stage2_style_gradients_match_central_differences() {
        let vocab = sample_vocab();
        let (net, hn) = tiny_pair(11, false);
        let desc_ids = vocab.tokenize("return word number one");
        let src = [BOS_ID, 6, 7, SEP_ID, 8, 9, EOS_ID];
        let tgt = [8usize];
        let config = hn.config.clone();
        let mut store = hn.params;
        let loss_fn = move |s: &mut ParamStore<f64>| -> crate::numerics::Result<f64> {
            s.zero_grads();
            let hn = Hypernetwork { config: config.clone(), params: s.clone() };
            let mut g = Graph::new();
            let run = || -> Result<(Graph<f64>, Var)> {
                let vars = hn.build_adapters(&mut g, &desc_ids)?;
                let (loss, _) = net
                    .build_example_loss(&mut g, Some(&vars), &src, &tgt)
                    .map_err(|e| HypernetError::Config(e.to_string()))?;
                Ok((g, loss))
            };
            let (mut g, loss) =
                run().map_err(|e| NumericsError::Invalid(e.to_string()))?;
            g.backward(loss)?;
            g.export_grads(s)?;
            Ok(g.value(loss).scalar())
        };
        let mut rng = crate::numerics::Rng::new(0);
        let report = grad_check(&mut store, loss_fn, 60, &mut rng).unwrap();
        assert_eq!(report.checked, 60);
        assert!(report.max_rel_err < 1e-4, "worst {:?}: {}", report.worst, report.max_rel_err);
    }

    proptest! {
        #[test]
        fn slice_reshape_round_trips(
            pick in 0usize..5,
            seed in 0u64..1000,
        ) {
            let combos = [(2usize, 1usize), (8, 2), (4, 4), (16, 8), (3, 5)];
            let (h, a) = combos[pick];
            let p_len = 2 * h * a + a + h;
            let mut rng = crate::numerics::Rng::new(seed);
            let phi: Vec<f64> = (0..p_len).map(|_| rng.range_f64(-10.0, 10.0)).collect();
            let params = slice_reshape(&phi, h, a).unwrap();
            prop_assert_eq!(flatten_adapter(&params), phi);
        }
    }
}
