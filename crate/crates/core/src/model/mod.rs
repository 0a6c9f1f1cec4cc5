//! Attention encoder-decoder with a zero-initialized decoder, per-position
//! context gating and limited-vocabulary output masking.

mod backprop;
mod forward;
mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::ParamSlot;
use crate::lstm::LstmCellParams;
use crate::tensor::Tensor;

pub use crate::vocab::{limited_vocab, SpecialMap, VocabMask, Vocabulary};
pub use backprop::{forward_backward, ExampleRef, LossParts, Objective};
pub use forward::{
    attention, decoder_step, encode, init_decoder_state, output_logits, AttentionResult, DecoderState, Dropout,
    EncoderStates, Gate, StepOutput,
};
pub use reference::{check_gradients, random_gradient_check, reference_loss, GradCheckSetup};

/// Dimensions of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    /// Stacked LSTM layers in both encoder and decoder.
    pub layers: usize,
    pub attn_dim: usize,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize, hidden: usize, layers: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: hidden,
            hidden,
            layers,
            attn_dim: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0
            || self.tgt_vocab == 0
            || self.emb_dim == 0
            || self.hidden == 0
            || self.layers == 0
            || self.attn_dim == 0
        {
            return Err(Error::Validation(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[src_vocab, emb]`
    pub src_emb: Tensor,
    /// `[tgt_vocab, emb]`
    pub tgt_emb: Tensor,
    pub encoder: Vec<LstmCellParams>,
    pub decoder: Vec<LstmCellParams>,
    /// `[hidden, attn]`, applied to the top decoder state.
    pub att_dec: Tensor,
    /// `[hidden, attn]`, applied to each top encoder state.
    pub att_enc: Tensor,
    /// `[attn]`
    pub att_v: Tensor,
    /// `[2 * hidden, tgt_vocab]` over `[z_top ; context]`.
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim,
            hidden,
            layers,
            attn_dim,
        } = config;
        let stack = || {
            (0..layers)
                .map(|l| LstmCellParams::zeros(if l == 0 { emb_dim } else { hidden }, hidden))
                .collect::<Vec<_>>()
        };
        ModelParams {
            config,
            src_emb: Tensor::zeros(&[src_vocab, emb_dim]),
            tgt_emb: Tensor::zeros(&[tgt_vocab, emb_dim]),
            encoder: stack(),
            decoder: stack(),
            att_dec: Tensor::zeros(&[hidden, attn_dim]),
            att_enc: Tensor::zeros(&[hidden, attn_dim]),
            att_v: Tensor::zeros(&[attn_dim]),
            out_w: Tensor::zeros(&[2 * hidden, tgt_vocab]),
            out_b: Tensor::zeros(&[tgt_vocab]),
        }
    }

    /// Seeded uniform initialization in `[-range, range]`; biases start at
    /// zero except LSTM forget gates.
    pub fn init_with(config: ModelConfig, seed: u64, range: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim,
            hidden,
            layers,
            attn_dim,
        } = config;
        let src_emb = Tensor::uniform(&[src_vocab, emb_dim], range, &mut rng);
        let tgt_emb = Tensor::uniform(&[tgt_vocab, emb_dim], range, &mut rng);
        let stack = |rng: &mut ChaCha8Rng| {
            (0..layers)
                .map(|l| LstmCellParams::init(if l == 0 { emb_dim } else { hidden }, hidden, range, FORGET_BIAS, rng))
                .collect::<Vec<_>>()
        };
        let encoder = stack(&mut rng);
        let decoder = stack(&mut rng);
        Ok(ModelParams {
            config,
            src_emb,
            tgt_emb,
            encoder,
            decoder,
            att_dec: Tensor::uniform(&[hidden, attn_dim], range, &mut rng),
            att_enc: Tensor::uniform(&[hidden, attn_dim], range, &mut rng),
            att_v: Tensor::uniform(&[attn_dim], range, &mut rng),
            out_w: Tensor::uniform(&[2 * hidden, tgt_vocab], range, &mut rng),
            out_b: Tensor::zeros(&[tgt_vocab]),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        ModelParams::init_with(config, seed, INIT_RANGE)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.config)
    }

    /// Named tensors in a fixed order (the checkpoint and flattening order).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("src_emb".to_string(), &self.src_emb),
            ("tgt_emb".to_string(), &self.tgt_emb),
        ];
        for (side, stack) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (l, p) in stack.iter().enumerate() {
                out.push((format!("{side}.{l}.w_x"), &p.w_x));
                out.push((format!("{side}.{l}.w_h"), &p.w_h));
                out.push((format!("{side}.{l}.b"), &p.b));
            }
        }
        out.push(("att_dec".into(), &self.att_dec));
        out.push(("att_enc".into(), &self.att_enc));
        out.push(("att_v".into(), &self.att_v));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.src_emb, &mut self.tgt_emb];
        for stack in [&mut self.encoder, &mut self.decoder] {
            for p in stack.iter_mut() {
                out.push(&mut p.w_x);
                out.push(&mut p.w_h);
                out.push(&mut p.b);
            }
        }
        out.push(&mut self.att_dec);
        out.push(&mut self.att_enc);
        out.push(&mut self.att_v);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.add_scaled(src, alpha);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(alpha));
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sq_norm()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// One slot per named tensor, matching [`ModelParams::flatten`].
    pub fn slots(&self) -> Vec<ParamSlot> {
        let mut off = 0;
        self.tensors()
            .into_iter()
            .map(|(name, t)| {
                let s = ParamSlot::new(name, off, t.len());
                off += t.len();
                s
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip_and_slots() {
        let p = ModelParams::init(ModelConfig::new(7, 9, 4, 2), 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = p.zeros_like();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        let slots = p.slots();
        assert_eq!(slots.len(), 2 + 2 * 2 * 3 + 5);
        assert_eq!(slots.last().unwrap().offset + slots.last().unwrap().len, flat.len());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(7, 9, 4, 2);
        let a = ModelParams::init(cfg, 3).unwrap();
        assert_eq!(a, ModelParams::init(cfg, 3).unwrap());
        assert_ne!(a, ModelParams::init(cfg, 4).unwrap());
        for (name, t) in a.tensors() {
            if name.ends_with(".b") {
                continue;
            }
            assert!(t.data().iter().all(|v| v.abs() <= INIT_RANGE), "{name}");
        }
        assert!(a.encoder[0].b.data()[4..8].iter().all(|v| *v == FORGET_BIAS));
    }
}
