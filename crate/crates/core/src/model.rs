//! The full semi-parametric model: backbone, optional fusion module and
//! optional frozen augmentation encoder, all sharing one parameter store.

use crate::autograd::{log_softmax_rows, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{concat_tokens, FusionConfig, GateValues, GatedCrossAttention, PerceiverResampler, Strategy};
use crate::nn::{shift_right, Backbone, EncodedSequence, Encoder, ModelConfig};
use crate::params::{Graph, Initializer, ParamStore};
use crate::retrieval::{PAD, SEP};

pub struct FusionModule {
    pub resampler: PerceiverResampler,
    pub gated: GatedCrossAttention,
}

pub struct Model {
    pub model_cfg: ModelConfig,
    pub fusion_cfg: FusionConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: Option<FusionModule>,
    pub aug_encoder: Option<Encoder>,
}

/// Per-instance inputs: token ids of the prompt and of each augmentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelInput {
    pub input: Vec<u32>,
    pub augmentations: Vec<Vec<u32>>,
}

impl Model {
    /// Backbone parameters are drawn first, so two models built from the same
    /// seed share backbone weights regardless of the fusion strategy.
    pub fn new(model_cfg: ModelConfig, fusion_cfg: FusionConfig, seed: u64) -> Result<Self> {
        let mut violations = model_cfg.violations();
        violations.extend(fusion_cfg.violations());
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed).with_proj_std(model_cfg.init_std);
        let backbone = Backbone::new(&mut store, &mut init, &model_cfg);
        let (fusion, aug_encoder) = if fusion_cfg.strategy == Strategy::Zemi {
            let resampler = PerceiverResampler::new(&mut store, &mut init, &model_cfg, &fusion_cfg);
            let gated = GatedCrossAttention::new(&mut store, &mut init, &model_cfg, &fusion_cfg);
            let aug_encoder = fusion_cfg
                .frozen_aug_encoder
                .then(|| Encoder::new(&mut store, &mut init, "aug_encoder", &model_cfg));
            (Some(FusionModule { resampler, gated }), aug_encoder)
        } else {
            (None, None)
        };
        let mut model = Model { model_cfg, fusion_cfg, store, backbone, fusion, aug_encoder };
        if let Some(enc) = &model.aug_encoder {
            for id in enc.param_ids() {
                model.store.set_trainable(id, false);
            }
            model.snapshot_aug_encoder();
        }
        Ok(model)
    }

    /// Copies the current backbone encoder into the frozen augmentation
    /// encoder (no-op when there is none).
    pub fn snapshot_aug_encoder(&mut self) {
        let Some(enc) = &self.aug_encoder else { return };
        let pairs: Vec<_> = self.backbone.encoder.param_ids().into_iter().zip(enc.param_ids()).collect();
        for (src, dst) in pairs {
            let v = self.store.get(src).clone();
            *self.store.get_mut(dst) = v;
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.fusion_cfg.strategy
    }

    pub fn param_count(&self) -> usize {
        self.store.num_values(false)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.num_values(true)
    }

    fn fusion_module(&self) -> Result<&FusionModule> {
        self.fusion
            .as_ref()
            .ok_or_else(|| Error::Contract("model was built without the zemi fusion module".into()))
    }

    pub fn encode(&self, g: &mut Graph, tokens: &[u32]) -> Result<EncodedSequence> {
        self.backbone.encode(g, tokens)
    }

    fn encode_augmentation(&self, g: &mut Graph, tokens: &[u32]) -> Result<EncodedSequence> {
        match &self.aug_encoder {
            Some(enc) => self.backbone.encode_with(g, enc, tokens),
            None => self.backbone.encode(g, tokens),
        }
    }

    pub fn resample(&self, g: &mut Graph, aug: &EncodedSequence) -> Result<Var> {
        self.fusion_module()?.resampler.forward(g, aug)
    }

    pub fn gated_fuse(&self, g: &mut Graph, input: &EncodedSequence, resampled: &[Var]) -> Result<Var> {
        self.fusion_module()?.gated.forward(g, input.states, resampled)
    }

    /// Decoder memory for one instance under `strategy`.
    pub fn fuse(&self, g: &mut Graph, strategy: Strategy, x: &ModelInput) -> Result<EncodedSequence> {
        if x.augmentations.len() > self.fusion_cfg.k {
            return Err(Error::Contract(format!(
                "{} augmentations given, configured k is {}",
                x.augmentations.len(),
                self.fusion_cfg.k
            )));
        }
        let cap = self.fusion_cfg.aug_max_tokens;
        let augs: Vec<Vec<u32>> = x.augmentations.iter().map(|a| a[..a.len().min(cap)].to_vec()).collect();
        match strategy {
            Strategy::NoAug => self.encode(g, &x.input),
            Strategy::Concat => {
                let tokens = concat_tokens(&x.input, &augs, SEP, self.fusion_cfg.concat_max_tokens);
                self.encode(g, &tokens)
            }
            Strategy::FiD => {
                if augs.is_empty() {
                    return self.encode(g, &x.input);
                }
                let mut states = Vec::with_capacity(augs.len());
                let mut mask = Vec::new();
                let mut truncated = false;
                for aug in &augs {
                    let tokens = concat_tokens(&x.input, std::slice::from_ref(aug), SEP, usize::MAX);
                    let enc = self.encode(g, &tokens)?;
                    states.push(enc.states);
                    mask.extend(enc.mask);
                    truncated |= enc.truncated;
                }
                let states = if states.len() == 1 { states[0] } else { g.concat(0, &states)? };
                Ok(EncodedSequence { states, mask, truncated })
            }
            Strategy::Zemi => {
                let fusion = self.fusion_module()?;
                let input = self.encode(g, &x.input)?;
                let mut resampled = Vec::with_capacity(augs.len());
                for aug in &augs {
                    let enc = self.encode_augmentation(g, aug)?;
                    resampled.push(fusion.resampler.forward(g, &enc)?);
                }
                let states = fusion.gated.forward(g, input.states, &resampled)?;
                Ok(EncodedSequence { states, mask: input.mask, truncated: input.truncated })
            }
        }
    }

    pub fn decode(&self, g: &mut Graph, prefix: &[u32], memory: &EncodedSequence) -> Result<Var> {
        self.backbone.decode(g, prefix, memory)
    }

    /// Summed token negative log-likelihood of `targets` (teacher forced)
    /// and the number of target positions.
    pub fn nll(&self, g: &mut Graph, strategy: Strategy, x: &ModelInput, targets: &[u32]) -> Result<(Var, usize)> {
        let memory = self.fuse(g, strategy, x)?;
        let logits = self.decode(g, &shift_right(targets), &memory)?;
        let loss = g.cross_entropy(logits, &to_usize(targets), Some(PAD as usize), Reduction::Sum)?;
        let count = targets.iter().filter(|t| **t != PAD).count();
        Ok((loss, count))
    }

    /// Inference convenience: logits for `prefix` given the fused memory.
    pub fn logits(&self, strategy: Strategy, x: &ModelInput, prefix: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store, false);
        let memory = self.fuse(&mut g, strategy, x)?;
        let logits = self.decode(&mut g, prefix, &memory)?;
        Ok(g.value(logits).clone())
    }

    /// Fused decoder memory as a plain tensor.
    pub fn memory(&self, strategy: Strategy, x: &ModelInput) -> Result<(Tensor, Vec<bool>)> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store, false);
        let m = self.fuse(&mut g, strategy, x)?;
        Ok((g.value(m.states).clone(), m.mask))
    }

    /// Sum of log-probabilities of `choice` tokens given the memory.
    pub fn score_tokens(&self, g: &mut Graph, memory: &EncodedSequence, choice: &[u32], length_normalized: bool) -> Result<f64> {
        if choice.is_empty() {
            return Err(Error::Contract("cannot score an empty answer choice".into()));
        }
        let logits = self.decode(g, &shift_right(choice), memory)?;
        let lp = log_softmax_rows(g.value(logits));
        let total: f64 = choice.iter().enumerate().map(|(t, &c)| lp.row(t)[c as usize]).sum();
        Ok(if length_normalized { total / choice.len() as f64 } else { total })
    }

    pub fn gate_values(&self) -> Result<GateValues> {
        if self.fusion_cfg.strategy != Strategy::Zemi {
            return Err(Error::Contract(format!(
                "gate values requested for a {} model",
                self.fusion_cfg.strategy
            )));
        }
        let (a, f) = self
            .fusion_module()?
            .gated
            .gate_ids()
            .ok_or_else(|| Error::Contract("model has no tanh gates (gated = false)".into()))?;
        Ok(GateValues::from_tensors(self.store.get(a), self.store.get(f)))
    }

    /// Sets every gate of every gated layer to `value`.
    pub fn set_gates(&mut self, value: f64) -> Result<()> {
        let ids = self.fusion_module()?.gated.all_gate_ids();
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
        }
        Ok(())
    }
}

pub(crate) fn to_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}
