//! Encoder-decoder transformer built on the tape.
//!
//! Pre-norm residual blocks, fixed sinusoidal positions added at the
//! embedding, GELU feed-forward layers, and bias-free attention projections.
//! The decoder starts from `PAD`, and with tied embeddings the output logits
//! are `LN(h) · Eᵀ / sqrt(d_model)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{sinusoidal_positions, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, Initializer, ParamId, ParamStore};
use crate::retrieval::PAD;

pub const LN_EPS: f64 = 1e-5;
pub const PROJ_STD: f64 = 0.02;
pub const EMBED_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
    /// Standard deviation of projection weights at initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 2,
            vocab_size: 64,
            max_seq_len: 1024,
            tie_embeddings: true,
            init_std: PROJ_STD,
        }
    }
}

impl ModelConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_ff", self.d_ff),
            ("model.n_enc_layers", self.n_enc_layers),
            ("model.n_dec_layers", self.n_dec_layers),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (k, x) in positive {
            if x == 0 {
                v.push(format!("{k} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            v.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            v.push("model.init_std must be positive".into());
        }
        if self.vocab_size < 4 {
            v.push("model.vocab_size must cover the 4 special tokens".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    fn ffn_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        d * f + f + f * d + d
    }

    fn attn_params(&self) -> usize {
        4 * self.d_model * self.d_model
    }

    /// Parameters of one encoder stack (layers plus final norm).
    pub fn encoder_param_count(&self) -> usize {
        let d = self.d_model;
        self.n_enc_layers * (2 * 2 * d + self.attn_params() + self.ffn_params()) + 2 * d
    }

    /// Exact number of backbone parameters for this configuration.
    pub fn param_count(&self) -> usize {
        let (d, v) = (self.d_model, self.vocab_size);
        let embed = v * d * if self.tie_embeddings { 1 } else { 2 };
        let decoder = self.n_dec_layers * (3 * 2 * d + 2 * self.attn_params() + self.ffn_params()) + 2 * d;
        embed + self.encoder_param_count() + decoder
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init.projection(&[d_in, d_out]), true);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), d, d_ff, true),
            down: Linear::new(store, init, &format!("{name}.down"), d_ff, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with bias-free projections.
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, d: usize, n_heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), d, d, false),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, false),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, false),
            n_heads,
            d_model: d,
        }
    }

    /// `queries: [Lq × d]` attend over `keys_values: [Lk × d]`.
    ///
    /// Positions with `kv_mask[j] == false` get zero weight; with `causal`,
    /// query `i` also ignores keys `j > i`. A query with no visible key (for
    /// example `Lk == 0`) produces a zero row.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys_values: Var,
        kv_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let qs = g.shape(queries).to_vec();
        let ks = g.shape(keys_values).to_vec();
        if qs.len() != 2 || ks.len() != 2 || qs[1] != self.d_model || ks[1] != self.d_model {
            return Err(Error::Shape(format!(
                "attention expects [L x {}] inputs, got {qs:?} and {ks:?}",
                self.d_model
            )));
        }
        let (lq, lk) = (qs[0], ks[0]);
        if kv_mask.len() != lk {
            return Err(Error::Shape(format!("kv mask of length {} for {lk} keys", kv_mask.len())));
        }
        if lq == 0 || lk == 0 {
            return Ok(g.constant(Tensor::zeros(&[lq, self.d_model])));
        }
        let allowed: Vec<bool> = (0..lq)
            .flat_map(|i| (0..lk).map(move |j| (i, j)))
            .map(|(i, j)| kv_mask[j] && (!causal || j <= i))
            .collect();
        let all_allowed = allowed.iter().all(|a| *a);

        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys_values)?;
        let v = self.v.forward(g, keys_values)?;
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
            };
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = if all_allowed {
                g.softmax(scores)?
            } else {
                g.masked_softmax(scores, &allowed)?
            };
            heads.push(g.matmul(weights, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat(1, &heads)? };
        self.o.forward(g, ctx)
    }
}

/// Encoder output: `states: [L × d_model]` plus a validity mask.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub states: Var,
    pub mask: Vec<bool>,
    /// Set when the input was longer than `max_seq_len` and was cut.
    pub truncated: bool,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

pub struct Encoder {
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_enc_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d),
                    attn: MultiHeadAttention::new(store, init, &format!("{p}.attn"), d, cfg.n_heads),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ffn: FeedForward::new(store, init, &format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        Encoder { layers, final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let mut x = x;
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, x)?;
            let a = layer.attn.forward(g, h, h, mask, false)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        self.final_ln.forward(g, x)
    }

    /// Every parameter id, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.ln_attn.gain, l.ln_attn.bias]);
            ids.extend([l.attn.q.w, l.attn.k.w, l.attn.v.w, l.attn.o.w]);
            ids.extend([l.ln_ff.gain, l.ln_ff.bias]);
            ids.extend([l.ffn.up.w]);
            ids.extend(l.ffn.up.b);
            ids.extend([l.ffn.down.w]);
            ids.extend(l.ffn.down.b);
        }
        ids.extend([self.final_ln.gain, self.final_ln.bias]);
        ids
    }
}

pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

pub struct Decoder {
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_dec_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, init, &format!("{p}.self_attn"), d, cfg.n_heads),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{p}.cross_attn"), d, cfg.n_heads),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ffn: FeedForward::new(store, init, &format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        Decoder { layers, final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d) }
    }

    pub fn forward(&self, g: &mut Graph, y: Var, memory: &EncodedSequence) -> Result<Var> {
        let len = g.shape(y)[0];
        let self_mask = vec![true; len];
        let mut y = y;
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, y)?;
            let a = layer.self_attn.forward(g, h, h, &self_mask, true)?;
            y = g.add(y, a)?;
            let h = layer.ln_cross.forward(g, y)?;
            let c = layer.cross_attn.forward(g, h, memory.states, &memory.mask, false)?;
            y = g.add(y, c)?;
            let h = layer.ln_ff.forward(g, y)?;
            let f = layer.ffn.forward(g, h)?;
            y = g.add(y, f)?;
        }
        self.final_ln.forward(g, y)
    }
}

/// The encoder-decoder backbone shared by every fusion strategy.
pub struct Backbone {
    pub cfg: ModelConfig,
    pub embed: ParamId,
    pub lm_head: Option<ParamId>,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ModelConfig) -> Self {
        let embed = store.add("embed", init.normal(&[cfg.vocab_size, cfg.d_model], EMBED_STD), true);
        let lm_head = (!cfg.tie_embeddings)
            .then(|| store.add("lm_head", init.projection(&[cfg.vocab_size, cfg.d_model]), true));
        let encoder = Encoder::new(store, init, "encoder", cfg);
        let decoder = Decoder::new(store, init, "decoder", cfg);
        Backbone { cfg: cfg.clone(), embed, lm_head, encoder, decoder }
    }

    fn check_ids(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t >= self.cfg.vocab_size {
                    Err(Error::Index(format!(
                        "token id {t} out of range for vocabulary of {}",
                        self.cfg.vocab_size
                    )))
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Token embeddings plus sinusoidal positions, `[L × d]`.
    pub fn embed_tokens(&self, g: &mut Graph, tokens: &[u32]) -> Result<Var> {
        let ids = self.check_ids(tokens)?;
        let table = g.param(self.embed);
        let e = g.embedding(table, &ids)?;
        let pe = g.constant(sinusoidal_positions(ids.len(), self.cfg.d_model));
        g.add(e, pe)
    }

    pub fn encode(&self, g: &mut Graph, tokens: &[u32]) -> Result<EncodedSequence> {
        self.encode_with(g, &self.encoder, tokens)
    }

    /// Encodes with an explicit encoder stack (the frozen augmentation
    /// encoder shares the embedding table but not the layers).
    pub fn encode_with(&self, g: &mut Graph, encoder: &Encoder, tokens: &[u32]) -> Result<EncodedSequence> {
        let truncated = tokens.len() > self.cfg.max_seq_len;
        let tokens = &tokens[..tokens.len().min(self.cfg.max_seq_len)];
        if tokens.is_empty() {
            let states = g.constant(Tensor::zeros(&[0, self.cfg.d_model]));
            return Ok(EncodedSequence { states, mask: Vec::new(), truncated });
        }
        let mask = vec![true; tokens.len()];
        let x = self.embed_tokens(g, tokens)?;
        let states = encoder.forward(g, x, &mask)?;
        Ok(EncodedSequence { states, mask, truncated })
    }

    /// Logits `[Lt × vocab]` for every prefix position, teacher-forced.
    pub fn decode(&self, g: &mut Graph, prefix: &[u32], memory: &EncodedSequence) -> Result<Var> {
        if prefix.len() > self.cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "decoder prefix of {} tokens exceeds max_seq_len {}",
                prefix.len(),
                self.cfg.max_seq_len
            )));
        }
        if memory.mask.len() != g.shape(memory.states)[0] {
            return Err(Error::Shape("memory mask does not match memory length".into()));
        }
        if prefix.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[0, self.cfg.vocab_size])));
        }
        let y = self.embed_tokens(g, prefix)?;
        let h = self.decoder.forward(g, y, memory)?;
        match self.lm_head {
            Some(head) => {
                let w = g.param(head);
                g.matmul_t(h, w)
            }
            None => {
                let e = g.param(self.embed);
                let logits = g.matmul_t(h, e)?;
                g.scale(logits, 1.0 / (self.cfg.d_model as f64).sqrt())
            }
        }
    }
}

/// Decoder input for teacher forcing: `PAD` followed by all but the last
/// target token.
pub fn shift_right(targets: &[u32]) -> Vec<u32> {
    if targets.is_empty() {
        return Vec::new();
    }
    let mut prefix = Vec::with_capacity(targets.len());
    prefix.push(PAD);
    prefix.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    prefix
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 1,
            n_dec_layers: 1,
            vocab_size: 12,
            max_seq_len: 16,
            tie_embeddings: true,
            init_std: PROJ_STD,
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(3);
        let bb = Backbone::new(&mut store, &mut init, cfg);
        (store, bb)
    }

    #[test]
    fn config_violations_are_all_listed() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, d_ff: 0, vocab_size: 2, ..tiny() };
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn param_count_matches_store() {
        for tie in [true, false] {
            let cfg = ModelConfig { tie_embeddings: tie, n_enc_layers: 2, ..tiny() };
            let (store, _) = build(&cfg);
            assert_eq!(store.num_values(false), cfg.param_count());
        }
    }

    #[test]
    fn encode_shapes_and_empty() {
        let cfg = tiny();
        let (store, bb) = build(&cfg);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let e = bb.encode(&mut g, &[]).unwrap();
        assert_eq!(g.shape(e.states), &[0, 8]);
        assert!(e.mask.is_empty());
        let e = bb.encode(&mut g, &[4, 5, 6]).unwrap();
        assert_eq!(g.shape(e.states), &[3, 8]);
        assert!(!e.truncated);
        let long: Vec<u32> = (0..20).map(|i| 4 + i % 8).collect();
        let e = bb.encode(&mut g, &long).unwrap();
        assert!(e.truncated);
        assert_eq!(e.len(), 16);
    }

    #[test]
    fn decode_empty_memory_is_valid() {
        let cfg = tiny();
        let (store, bb) = build(&cfg);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let mem = bb.encode(&mut g, &[]).unwrap();
        let logits = bb.decode(&mut g, &[0, 5], &mem).unwrap();
        assert_eq!(g.shape(logits), &[2, 12]);
    }

    #[test]
    fn out_of_range_token_is_index_error() {
        let cfg = tiny();
        let (store, bb) = build(&cfg);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        assert!(matches!(bb.encode(&mut g, &[12]), Err(Error::Index(_))));
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        let attn = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2);
        let mut rng = Initializer::new(1);
        let kv = rng.normal(&[1, 8], 1.0);
        let q1 = rng.normal(&[3, 8], 1.0);
        let q2 = rng.normal(&[3, 8], 1.0);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let kv = g.constant(kv);
        let (q1, q2) = (g.constant(q1), g.constant(q2));
        let a = attn.forward(&mut g, q1, kv, &[true], false).unwrap();
        let b = attn.forward(&mut g, q2, kv, &[true], false).unwrap();
        // every row equals (kv · Wv) · Wo
        let wv = g.param(attn.v.w);
        let wo = g.param(attn.o.w);
        let v = g.matmul(kv, wv).unwrap();
        let expected = g.matmul(v, wo).unwrap();
        for r in 0..3 {
            for (x, y) in g.value(a).row(r).iter().zip(g.value(expected).row(0)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() < 1e-15);
        let _ = cfg;
    }

    #[test]
    fn fully_masked_attention_is_zero() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(9);
        let attn = MultiHeadAttention::new(&mut store, &mut init, "a", 8, 2);
        let q = init.normal(&[2, 8], 1.0);
        let kv = init.normal(&[3, 8], 1.0);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let (q, kv) = (g.constant(q), g.constant(kv));
        let out = attn.forward(&mut g, q, kv, &[false, false, false], false).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shift_right_prepends_pad() {
        assert_eq!(shift_right(&[7, 8, 1]), vec![0, 7, 8]);
        assert!(shift_right(&[]).is_empty());
    }
}
