//! Retrieval-augmentation fusion: a perceiver resampler that compresses each
//! encoded augmentation to a fixed number of latents, and a gated
//! cross-attention block that lets the encoded prompt read those latents
//! through two tanh gates initialized at zero.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{EncodedSequence, FeedForward, LayerNorm, ModelConfig, MultiHeadAttention};
use crate::params::{Graph, Initializer, ParamId, ParamStore};

pub const LATENT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Prompt only.
    NoAug,
    /// Prompt and augmentations joined into one encoder input.
    Concat,
    /// Each (prompt, augmentation) pair encoded separately, states concatenated.
    FiD,
    /// Resampler + gated cross-attention.
    Zemi,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::NoAug, Strategy::Concat, Strategy::FiD, Strategy::Zemi];

    pub fn uses_retrieval(self) -> bool {
        self != Strategy::NoAug
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NoAug => "noaug",
            Strategy::Concat => "concat",
            Strategy::FiD => "fid",
            Strategy::Zemi => "zemi",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!("unknown fusion strategy {s:?} (expected noaug, concat, fid or zemi)"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: Strategy,
    /// Augmentations per instance.
    pub k: usize,
    /// Latent length of the resampler.
    pub l_q: usize,
    pub aug_max_tokens: usize,
    pub concat_max_tokens: usize,
    /// Encode augmentations with a frozen snapshot of the encoder.
    pub frozen_aug_encoder: bool,
    /// `false` removes both tanh gates (plain residual cross-attention).
    pub gated: bool,
    /// One gate value per channel instead of one scalar per gate.
    pub per_channel_gates: bool,
    pub resampler_layers: usize,
    pub gated_layers: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Zemi,
            k: 5,
            l_q: 64,
            aug_max_tokens: 256,
            concat_max_tokens: 1024,
            frozen_aug_encoder: false,
            gated: true,
            per_channel_gates: false,
            resampler_layers: 1,
            gated_layers: 1,
        }
    }
}

impl FusionConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.l_q == 0 {
            v.push("fusion.l_q must be positive".into());
        }
        if self.aug_max_tokens == 0 {
            v.push("fusion.aug_max_tokens must be at least 1".into());
        }
        if self.concat_max_tokens == 0 {
            v.push("fusion.concat_max_tokens must be positive".into());
        }
        if self.strategy == Strategy::Zemi && (self.resampler_layers == 0 || self.gated_layers == 0) {
            v.push("fusion.resampler_layers and fusion.gated_layers must be positive".into());
        }
        v
    }

    fn gate_len(&self, d: usize) -> usize {
        if self.per_channel_gates {
            d
        } else {
            1
        }
    }

    /// Exact parameter count added by the Zemi fusion module on top of the
    /// backbone (latent query, resampler, gated block).
    pub fn param_count(&self, model: &ModelConfig) -> usize {
        if self.strategy != Strategy::Zemi {
            return 0;
        }
        let d = model.d_model;
        let ffn = 2 * d * model.d_ff + model.d_ff + d;
        let attn = 4 * d * d;
        let resampler = 3 * 2 * d + attn + ffn;
        let gates = if self.gated { 2 * self.gate_len(d) } else { 0 };
        let gated = 2 * 2 * d + attn + ffn + gates;
        self.l_q * d + self.resampler_layers * resampler + 2 * d + self.gated_layers * gated
    }
}

struct ResamplerLayer {
    ln_latents: LayerNorm,
    ln_media: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
}

/// Maps an encoded augmentation of any length to `[l_Q × d]`.
///
/// Keys and values are the augmentation states only; the latents do not
/// attend to themselves. The output is layer-normalized.
pub struct PerceiverResampler {
    pub latents: ParamId,
    layers: Vec<ResamplerLayer>,
    ln_out: LayerNorm,
}

impl PerceiverResampler {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ModelConfig, fusion: &FusionConfig) -> Self {
        let d = cfg.d_model;
        let latents = store.add("fusion.latents", init.normal(&[fusion.l_q, d], LATENT_STD), true);
        let layers = (0..fusion.resampler_layers)
            .map(|i| {
                let p = format!("fusion.resampler{i}");
                ResamplerLayer {
                    ln_latents: LayerNorm::new(store, &format!("{p}.ln_latents"), d),
                    ln_media: LayerNorm::new(store, &format!("{p}.ln_media"), d),
                    attn: MultiHeadAttention::new(store, init, &format!("{p}.attn"), d, cfg.n_heads),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ffn: FeedForward::new(store, init, &format!("{p}.ffn"), d, cfg.d_ff),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "fusion.resampler.ln_out", d);
        PerceiverResampler { latents, layers, ln_out }
    }

    pub fn forward(&self, g: &mut Graph, aug: &EncodedSequence) -> Result<Var> {
        let mut x = g.param(self.latents);
        for layer in &self.layers {
            if !aug.is_empty() {
                let q = layer.ln_latents.forward(g, x)?;
                let kv = layer.ln_media.forward(g, aug.states)?;
                let a = layer.attn.forward(g, q, kv, &aug.mask, false)?;
                x = g.add(x, a)?;
            }
            let h = layer.ln_ff.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
        }
        self.ln_out.forward(g, x)
    }
}

struct GatedLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
    gate_attn: Option<ParamId>,
    gate_ff: Option<ParamId>,
}

/// `x₁ = I + tanh(g_attn)·CrossAttn(LN(I), A')`,
/// `H = x₁ + tanh(g_ff)·FFW(LN(x₁))`, with both gates starting at zero so
/// that `H == I` at initialization.
pub struct GatedCrossAttention {
    layers: Vec<GatedLayer>,
}

impl GatedCrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &ModelConfig, fusion: &FusionConfig) -> Self {
        let d = cfg.d_model;
        let gate_len = fusion.gate_len(d);
        let layers = (0..fusion.gated_layers)
            .map(|i| {
                let p = format!("fusion.gated{i}");
                let ln_attn = LayerNorm::new(store, &format!("{p}.ln_attn"), d);
                let attn = MultiHeadAttention::new(store, init, &format!("{p}.attn"), d, cfg.n_heads);
                let ln_ff = LayerNorm::new(store, &format!("{p}.ln_ff"), d);
                let ffn = FeedForward::new(store, init, &format!("{p}.ffn"), d, cfg.d_ff);
                let (gate_attn, gate_ff) = if fusion.gated {
                    (
                        Some(store.add(format!("{p}.gate_attn"), Tensor::zeros(&[gate_len]), true)),
                        Some(store.add(format!("{p}.gate_ff"), Tensor::zeros(&[gate_len]), true)),
                    )
                } else {
                    (None, None)
                };
                GatedLayer { ln_attn, attn, ln_ff, ffn, gate_attn, gate_ff }
            })
            .collect();
        GatedCrossAttention { layers }
    }

    fn gate(g: &mut Graph, x: Var, gate: Option<ParamId>) -> Result<Var> {
        let Some(gate) = gate else { return Ok(x) };
        let raw = g.param(gate);
        let t = g.tanh(raw)?;
        if g.value(t).numel() == 1 {
            g.scale_by(x, t)
        } else {
            g.mul_row(x, t)
        }
    }

    /// Output has the shape of `input`. An empty `resampled` list returns
    /// `input` itself.
    pub fn forward(&self, g: &mut Graph, input: Var, resampled: &[Var]) -> Result<Var> {
        if resampled.is_empty() {
            return Ok(input);
        }
        let media = if resampled.len() == 1 { resampled[0] } else { g.concat(0, resampled)? };
        let media_mask = vec![true; g.shape(media)[0]];
        let mut x = input;
        for layer in &self.layers {
            let q = layer.ln_attn.forward(g, x)?;
            let a = layer.attn.forward(g, q, media, &media_mask, false)?;
            let a = Self::gate(g, a, layer.gate_attn)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, x)?;
            let f = layer.ffn.forward(g, h)?;
            let f = Self::gate(g, f, layer.gate_ff)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Gate parameter ids of the first layer.
    pub fn gate_ids(&self) -> Option<(ParamId, ParamId)> {
        let l = self.layers.first()?;
        Some((l.gate_attn?, l.gate_ff?))
    }

    pub fn all_gate_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [l.gate_attn, l.gate_ff])
            .flatten()
            .collect()
    }
}

/// Raw and tanh-squashed gate values. Per-channel gates report channel means.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateValues {
    pub attn_raw: f64,
    pub ff_raw: f64,
    pub attn_tanh: f64,
    pub ff_tanh: f64,
}

impl GateValues {
    pub fn from_tensors(attn: &Tensor, ff: &Tensor) -> Self {
        let mean = |t: &Tensor, f: fn(f64) -> f64| t.data().iter().map(|v| f(*v)).sum::<f64>() / t.numel() as f64;
        GateValues {
            attn_raw: mean(attn, |v| v),
            ff_raw: mean(ff, |v| v),
            attn_tanh: mean(attn, f64::tanh),
            ff_tanh: mean(ff, f64::tanh),
        }
    }
}

/// Order-preserving truncation of `input ⧺ SEP ⧺ aug₁ ⧺ SEP ⧺ …` to `max`
/// tokens; the prompt always comes first.
pub fn concat_tokens(input: &[u32], augs: &[Vec<u32>], sep: u32, max: usize) -> Vec<u32> {
    let mut out = input.to_vec();
    for aug in augs {
        out.push(sep);
        out.extend_from_slice(aug);
    }
    out.truncate(max);
    out
}
