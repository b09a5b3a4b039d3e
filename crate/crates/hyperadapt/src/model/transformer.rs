use crate::numerics::{self, Graph, ParamStore, Rng, Scalar, Tensor2, Var};

use super::adapters::{apply_adapter_graph, AdapterSet, AdapterVars};
use super::vocab::{Vocab, BOS_ID, EOS_ID, PAD_ID};
use super::{ModelConfig, ModelError, Result};

/// Layer-norm variance epsilon used everywhere in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Scaled dot-product multi-head attention reading `{prefix}.wq/.wk/.wv/.wo`
/// from `store` (h x h each, no biases). Queries come from `x_q`, keys and
/// values from `x_kv`; `causal` masks future positions.
pub fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    n_heads: usize,
    causal: bool,
) -> numerics::Result<Var> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let width = g.value(q).cols();
    let d_head = width / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let (lo, hi) = (i * d_head, (i + 1) * d_head);
        let qs = g.slice_cols(q, lo, hi)?;
        let ks = g.slice_cols(k, lo, hi)?;
        let vs = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(ks)?;
        let scores = g.matmul(qs, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = if causal { g.causal_mask(scores)? } else { scores };
        let attn = g.softmax_rows(scores)?;
        heads.push(g.matmul(attn, vs)?);
    }
    let cat = g.concat_cols(&heads)?;
    g.matmul(cat, wo)
}

fn layer_norm_named<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> numerics::Result<Var> {
    let gain = g.param(store, &format!("{prefix}.g"))?;
    let bias = g.param(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> numerics::Result<Var> {
    let w1 = g.param(store, &format!("{prefix}.w1"))?;
    let b1 = g.param(store, &format!("{prefix}.b1"))?;
    let w2 = g.param(store, &format!("{prefix}.w2"))?;
    let b2 = g.param(store, &format!("{prefix}.b2"))?;
    let hidden = g.matmul(x, w1)?;
    let hidden = g.add_row(hidden, b1)?;
    let hidden = g.relu(hidden)?;
    let out = g.matmul(hidden, w2)?;
    g.add_row(out, b2)
}

/// Post-norm encoder layer under `prefix`: self-attention (adapter slot
/// directly after it, before the residual sum), then the feed-forward
/// sublayer. Shared with the hypernetwork's description encoder, which
/// passes `adapter: None`.
pub fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    n_heads: usize,
    adapter: Option<&AdapterVars>,
) -> numerics::Result<Var> {
    let mut a = attention(g, store, &format!("{prefix}.attn"), x, x, n_heads, false)?;
    if let Some(ad) = adapter {
        a = apply_adapter_graph(g, a, ad)?;
    }
    let sum = g.add(x, a)?;
    let x = layer_norm_named(g, store, &format!("{prefix}.ln1"), sum)?;
    let f = ffn_block(g, store, &format!("{prefix}.ffn"), x)?;
    let sum = g.add(x, f)?;
    layer_norm_named(g, store, &format!("{prefix}.ln2"), sum)
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// encoder output (adapter slot directly after cross-attention), then the
/// feed-forward sublayer.
fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    y: Var,
    enc_out: Var,
    n_heads: usize,
    adapter: Option<&AdapterVars>,
) -> numerics::Result<Var> {
    let s = attention(g, store, &format!("{prefix}.self"), y, y, n_heads, true)?;
    let sum = g.add(y, s)?;
    let y = layer_norm_named(g, store, &format!("{prefix}.ln1"), sum)?;
    let mut c = attention(g, store, &format!("{prefix}.cross"), y, enc_out, n_heads, false)?;
    if let Some(ad) = adapter {
        c = apply_adapter_graph(g, c, ad)?;
    }
    let sum = g.add(y, c)?;
    let y = layer_norm_named(g, store, &format!("{prefix}.ln2"), sum)?;
    let f = ffn_block(g, store, &format!("{prefix}.ffn"), y)?;
    let sum = g.add(y, f)?;
    layer_norm_named(g, store, &format!("{prefix}.ln3"), sum)
}

/// Xavier-uniform matrix: limit sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier<T: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols).map(|_| T::from_f64(rng.range_f64(-limit, limit))).collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches by construction")
}

pub(crate) fn ones_row<T: Scalar>(cols: usize) -> Tensor2<T> {
    Tensor2::from_vec(1, cols, vec![T::one(); cols]).expect("length matches")
}

/// The frozen-or-trainable text-to-text transformer. Token embeddings are
/// tied with the output projection; one learned position table is shared by
/// encoder and decoder.
#[derive(Debug, Clone)]
pub struct MainNetwork<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> MainNetwork<T> {
    /// Fresh network: Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).subrng("init/main");
        let h = config.h;
        let f = config.ffn_width;
        let mut p = ParamStore::new();
        p.insert_matrix("tok_emb", xavier(&mut rng, config.vocab_size, h))?;
        p.insert_matrix("pos_emb", xavier(&mut rng, config.max_len, h))?;
        let attn_block = |p: &mut ParamStore<T>, rng: &mut Rng, prefix: &str| -> Result<()> {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert_matrix(&format!("{prefix}.{w}"), xavier(rng, h, h))?;
            }
            Ok(())
        };
        let norm = |p: &mut ParamStore<T>, prefix: &str| -> Result<()> {
            p.insert_vector(&format!("{prefix}.g"), ones_row(h))?;
            p.insert_vector(&format!("{prefix}.b"), Tensor2::zeros(1, h))?;
            Ok(())
        };
        let ffn = |p: &mut ParamStore<T>, rng: &mut Rng, prefix: &str| -> Result<()> {
            p.insert_matrix(&format!("{prefix}.w1"), xavier(rng, h, f))?;
            p.insert_vector(&format!("{prefix}.b1"), Tensor2::zeros(1, f))?;
            p.insert_matrix(&format!("{prefix}.w2"), xavier(rng, f, h))?;
            p.insert_vector(&format!("{prefix}.b2"), Tensor2::zeros(1, h))?;
            Ok(())
        };
        for i in 0..config.n_enc_layers {
            let l = format!("enc.l{i}");
            attn_block(&mut p, &mut rng, &format!("{l}.attn"))?;
            norm(&mut p, &format!("{l}.ln1"))?;
            ffn(&mut p, &mut rng, &format!("{l}.ffn"))?;
            norm(&mut p, &format!("{l}.ln2"))?;
        }
        for i in 0..config.n_dec_layers {
            let l = format!("dec.l{i}");
            attn_block(&mut p, &mut rng, &format!("{l}.self"))?;
            norm(&mut p, &format!("{l}.ln1"))?;
            attn_block(&mut p, &mut rng, &format!("{l}.cross"))?;
            norm(&mut p, &format!("{l}.ln2"))?;
            ffn(&mut p, &mut rng, &format!("{l}.ffn"))?;
            norm(&mut p, &format!("{l}.ln3"))?;
        }
        debug_assert_eq!(p.total_params(), config.param_count());
        Ok(MainNetwork { config, params: p })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn check_adapters(&self, adapters: Option<&[AdapterVars]>) -> Result<()> {
        if let Some(v) = adapters {
            if v.len() != self.config.n_layers() {
                return Err(ModelError::Config(format!(
                    "got {} adapters for {} layers",
                    v.len(),
                    self.config.n_layers()
                )));
            }
        }
        Ok(())
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 || len > self.config.max_len {
            return Err(ModelError::Config(format!(
                "{what} length {len} outside 1..={}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    fn embed_sequence(&self, g: &mut Graph<T>, ids: &[usize]) -> numerics::Result<Var> {
        let tok = g.param(&self.params, "tok_emb")?;
        let pos = g.param(&self.params, "pos_emb")?;
        let te = g.embed(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = g.embed(pos, &positions)?;
        g.add(te, pe)
    }

    /// Encoder stack on the tape. Adapter slots for encoder layers are
    /// `adapters[0..n_enc_layers]`.
    pub fn build_encoder(
        &self,
        g: &mut Graph<T>,
        adapters: Option<&[AdapterVars]>,
        src: &[usize],
    ) -> Result<Var> {
        self.check_adapters(adapters)?;
        self.check_len("source", src.len())?;
        let mut x = self.embed_sequence(g, src)?;
        for i in 0..self.config.n_enc_layers {
            let ad = adapters.map(|a| &a[i]);
            x = encoder_layer(g, &self.params, &format!("enc.l{i}"), x, self.config.n_heads, ad)?;
        }
        Ok(x)
    }

    /// Decoder stack over `enc_out`, returning logits (one row per decoder
    /// input position; vocabulary-sized columns via the tied embedding).
    /// Adapter slots for decoder layers are `adapters[n_enc_layers..]`.
    pub fn build_decoder_logits(
        &self,
        g: &mut Graph<T>,
        adapters: Option<&[AdapterVars]>,
        enc_out: Var,
        dec_input: &[usize],
    ) -> Result<Var> {
        self.check_adapters(adapters)?;
        self.check_len("decoder input", dec_input.len())?;
        let mut y = self.embed_sequence(g, dec_input)?;
        for i in 0..self.config.n_dec_layers {
            let ad = adapters.map(|a| &a[self.config.n_enc_layers + i]);
            y = decoder_layer(
                g,
                &self.params,
                &format!("dec.l{i}"),
                y,
                enc_out,
                self.config.n_heads,
                ad,
            )?;
        }
        let tok = g.param(&self.params, "tok_emb")?;
        let proj = g.transpose(tok)?;
        Ok(g.matmul(y, proj)?)
    }

    /// Full teacher-forced pass on an existing tape. `tgt` is the target
    /// token sequence without BOS/EOS; EOS is appended as the final label.
    /// Returns (scalar loss, logits).
    pub fn build_example_loss(
        &self,
        g: &mut Graph<T>,
        adapters: Option<&[AdapterVars]>,
        src: &[usize],
        tgt: &[usize],
    ) -> Result<(Var, Var)> {
        if tgt.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        let mut dec_input = Vec::with_capacity(tgt.len() + 1);
        dec_input.push(BOS_ID);
        dec_input.extend_from_slice(tgt);
        let mut labels = tgt.to_vec();
        labels.push(EOS_ID);

        let enc_out = self.build_encoder(g, adapters, src)?;
        let logits = self.build_decoder_logits(g, adapters, enc_out, &dec_input)?;
        let loss = g.cross_entropy(logits, &labels, Some(PAD_ID))?;
        Ok((loss, logits))
    }

    /// Convenience wrapper: one example, materialized adapters, fresh tape.
    pub fn forward_loss(
        &self,
        adapters: Option<&AdapterSet<T>>,
        src: &[usize],
        tgt: &[usize],
    ) -> Result<(T, Tensor2<T>)> {
        let mut g = Graph::new();
        let vars = self.mount_adapters(&mut g, adapters)?;
        let (loss, logits) = self.build_example_loss(&mut g, vars.as_deref(), src, tgt)?;
        Ok((g.value(loss).scalar(), g.value(logits).clone()))
    }

    /// Logits for an explicit decoder input (used to compare adapted and
    /// unadapted models position by position).
    pub fn full_logits(
        &self,
        adapters: Option<&AdapterSet<T>>,
        src: &[usize],
        dec_input: &[usize],
    ) -> Result<Tensor2<T>> {
        let mut g = Graph::new();
        let vars = self.mount_adapters(&mut g, adapters)?;
        let enc_out = self.build_encoder(&mut g, vars.as_deref(), src)?;
        let logits = self.build_decoder_logits(&mut g, vars.as_deref(), enc_out, dec_input)?;
        Ok(g.value(logits).clone())
    }

    fn mount_adapters(
        &self,
        g: &mut Graph<T>,
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<Option<Vec<AdapterVars>>> {
        match adapters {
            None => Ok(None),
            Some(set) => {
                set.validate(self.config.n_layers(), self.config.h, self.config.adapter_width)?;
                Ok(Some(set.to_vars(g)))
            }
        }
    }

    /// Greedy decoding: argmax token per step starting from BOS, until EOS
    /// or `max_new` tokens. The encoder runs once; each step re-runs only
    /// the decoder. Returns generated ids without BOS/EOS.
    pub fn greedy_decode_ids(
        &self,
        adapters: Option<&AdapterSet<T>>,
        src: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>> {
        let enc_out = {
            let mut g = Graph::new();
            let vars = self.mount_adapters(&mut g, adapters)?;
            let out = self.build_encoder(&mut g, vars.as_deref(), src)?;
            g.value(out).clone()
        };
        let mut generated: Vec<usize> = Vec::new();
        let budget = max_new.min(self.config.max_len.saturating_sub(1));
        while generated.len() < budget {
            let mut dec_input = Vec::with_capacity(generated.len() + 1);
            dec_input.push(BOS_ID);
            dec_input.extend_from_slice(&generated);
            let mut g = Graph::new();
            let vars = self.mount_adapters(&mut g, adapters)?;
            let enc = g.input(enc_out.clone());
            let logits = self.build_decoder_logits(&mut g, vars.as_deref(), enc, &dec_input)?;
            let last = g.value(logits).row(dec_input.len() - 1).to_vec();
            let next = argmax(&last);
            if next == EOS_ID {
                break;
            }
            generated.push(next);
        }
        Ok(generated)
    }

    /// Greedy decoding straight to text.
    pub fn greedy_decode(
        &self,
        vocab: &Vocab,
        adapters: Option<&AdapterSet<T>>,
        src: &[usize],
        max_new: usize,
    ) -> Result<String> {
        let ids = self.greedy_decode_ids(adapters, src, max_new)?;
        Ok(vocab.detokenize(&ids))
    }
}

/// First index of the maximum value (ties resolve to the lowest id).
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
