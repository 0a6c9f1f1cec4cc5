use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::lstm::{lstm_cell, LstmCellParams, LstmStep};
use crate::tensor::{axpy, dot, dropout_mask, log_softmax, softmax, vec_mat_acc};

/// Whether a target position may read the source context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Open,
    Closed,
}

impl From<bool> for Gate {
    fn from(open: bool) -> Self {
        if open {
            Gate::Open
        } else {
            Gate::Closed
        }
    }
}

/// Training-mode dropout between stacked layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

pub(crate) struct DropoutRng {
    rng: ChaCha8Rng,
    rate: f64,
}

impl DropoutRng {
    pub(crate) fn new(d: Option<Dropout>) -> Option<Self> {
        d.filter(|d| d.rate > 0.0).map(|d| DropoutRng {
            rng: ChaCha8Rng::seed_from_u64(d.seed),
            rate: d.rate,
        })
    }

    pub(crate) fn mask(&mut self, len: usize) -> Vec<f64> {
        dropout_mask(len, self.rate, &mut self.rng)
    }
}

/// Forward trace of one stacked layer over a whole sequence.
pub(crate) struct LayerTrace {
    /// Inputs actually fed to the cell (after dropout).
    pub inputs: Vec<Vec<f64>>,
    /// Dropout multipliers applied to the inputs, if any.
    pub masks: Vec<Option<Vec<f64>>>,
    pub steps: Vec<LstmStep>,
}

/// Runs a stack of LSTM layers over a sequence, layer by layer, from zero
/// initial states. Dropout (if any) is applied to inputs of layers above
/// the first.
pub(crate) fn run_stack(
    layers: &[LstmCellParams],
    first: Vec<Vec<f64>>,
    mut drop: Option<&mut DropoutRng>,
) -> Vec<LayerTrace> {
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(layers.len());
    let mut inputs = first;
    for (l, p) in layers.iter().enumerate() {
        let d = p.hidden();
        let mut masks = vec![None; inputs.len()];
        if l > 0 {
            if let Some(dr) = drop.as_deref_mut() {
                for (x, m) in inputs.iter_mut().zip(masks.iter_mut()) {
                    let mask = dr.mask(x.len());
                    x.iter_mut().zip(&mask).for_each(|(v, k)| *v *= k);
                    *m = Some(mask);
                }
            }
        }
        let zeros = vec![0.0; d];
        let mut steps: Vec<LstmStep> = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let (h_prev, c_prev) = match steps.last() {
                Some(s) => (s.h.as_slice(), s.c.as_slice()),
                None => (zeros.as_slice(), zeros.as_slice()),
            };
            let s = lstm_cell(x, h_prev, c_prev, p);
            steps.push(s);
        }
        let next: Vec<Vec<f64>> = steps.iter().map(|s| s.h.clone()).collect();
        traces.push(LayerTrace { inputs, masks, steps });
        inputs = next;
    }
    traces
}

/// Top-layer encoder states plus their attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    /// Top-layer hidden state per source position.
    pub top: Vec<Vec<f64>>,
    /// `top[j] · att_enc`, cached for attention.
    pub proj: Vec<Vec<f64>>,
    /// Final `(h, c)` per layer. Not used by the decoder, which starts from zero.
    pub finals: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.top.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }
}

pub(crate) fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
    if let Some(bad) = ids.iter().find(|&&w| w >= vocab) {
        return Err(Error::Validation(format!(
            "{side} token id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

pub(crate) fn project_encoder(top: &[Vec<f64>], params: &ModelParams) -> Vec<Vec<f64>> {
    top.iter()
        .map(|h| {
            let mut p = vec![0.0; params.config.attn_dim];
            vec_mat_acc(h, params.att_enc.data(), &mut p);
            p
        })
        .collect()
}

pub fn encode(source: &[usize], params: &ModelParams, dropout: Option<Dropout>) -> Result<EncoderStates> {
    if source.is_empty() {
        return Err(Error::Validation("empty source sentence".into()));
    }
    check_ids(source, params.config.src_vocab, "source")?;
    let mut drop = DropoutRng::new(dropout);
    let first = source.iter().map(|&w| params.src_emb.row(w).to_vec()).collect();
    let traces = run_stack(&params.encoder, first, drop.as_mut());
    let finals = traces
        .iter()
        .map(|t| {
            let s = t.steps.last().expect("non-empty");
            (s.h.clone(), s.c.clone())
        })
        .collect();
    let top: Vec<Vec<f64>> = traces
        .last()
        .expect("layers >= 1")
        .steps
        .iter()
        .map(|s| s.h.clone())
        .collect();
    let proj = project_encoder(&top, params);
    Ok(EncoderStates { top, proj, finals })
}

/// Per-layer `(h, c)` of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DecoderState {
    pub fn top(&self) -> &[f64] {
        &self.layers.last().expect("layers >= 1").0
    }
}

/// All-zero decoder state; never copied from the encoder.
pub fn init_decoder_state(layers: usize, hidden: usize) -> DecoderState {
    DecoderState {
        layers: vec![(vec![0.0; hidden], vec![0.0; hidden]); layers],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// Unnormalized scores `v · tanh(W_dec z + W_enc h_j)`.
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Σ_j a_j h_j` when the gate is open, exactly zero otherwise.
    pub context: Vec<f64>,
}

/// Attention internals kept for the backward pass.
pub(crate) struct AttentionTrace {
    pub result: AttentionResult,
    /// `tanh(query + proj_j)` per source position.
    pub act: Vec<Vec<f64>>,
}

pub(crate) fn attend(
    z_top: &[f64],
    top: &[Vec<f64>],
    proj: &[Vec<f64>],
    gate: Gate,
    params: &ModelParams,
) -> AttentionTrace {
    let mut query = vec![0.0; params.config.attn_dim];
    vec_mat_acc(z_top, params.att_dec.data(), &mut query);
    let v = params.att_v.data();
    let mut act = Vec::with_capacity(proj.len());
    let mut scores = Vec::with_capacity(proj.len());
    for pj in proj {
        let u: Vec<f64> = query.iter().zip(pj).map(|(q, p)| (q + p).tanh()).collect();
        scores.push(dot(v, &u));
        act.push(u);
    }
    let weights = softmax(&scores);
    let mut context = vec![0.0; params.config.hidden];
    if gate == Gate::Open {
        for (a, h) in weights.iter().zip(top) {
            axpy(*a, h, &mut context);
        }
    }
    AttentionTrace {
        result: AttentionResult {
            scores,
            weights,
            context,
        },
        act,
    }
}

pub fn attention(z_top: &[f64], enc: &EncoderStates, gate: Gate, params: &ModelParams) -> Result<AttentionResult> {
    if z_top.len() != params.config.hidden || enc.is_empty() {
        return Err(Error::Shape(format!(
            "decoder state of {} for hidden {} over {} source states",
            z_top.len(),
            params.config.hidden,
            enc.len()
        )));
    }
    Ok(attend(z_top, &enc.top, &enc.proj, gate, params).result)
}

/// `out_b + [z_top ; context] · out_w`
pub fn output_logits(z_top: &[f64], context: &[f64], params: &ModelParams) -> Vec<f64> {
    let d = params.config.hidden;
    let v = params.config.tgt_vocab;
    let w = params.out_w.data();
    let mut logits = params.out_b.data().to_vec();
    vec_mat_acc(z_top, &w[..d * v], &mut logits);
    vec_mat_acc(context, &w[d * v..], &mut logits);
    logits
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub attention: AttentionResult,
    pub state: DecoderState,
}

/// One decoder step: embed `prev_word`, advance the stack, attend, and
/// score the next word.
pub fn decoder_step(
    prev_word: usize,
    state: &DecoderState,
    enc: &EncoderStates,
    gate: Gate,
    params: &ModelParams,
    dropout: Option<Dropout>,
) -> Result<StepOutput> {
    check_ids(&[prev_word], params.config.tgt_vocab, "target")?;
    if state.layers.len() != params.decoder.len() {
        return Err(Error::Shape(format!(
            "decoder state has {} layers, model has {}",
            state.layers.len(),
            params.decoder.len()
        )));
    }
    let mut drop = DropoutRng::new(dropout);
    let mut x = params.tgt_emb.row(prev_word).to_vec();
    let mut layers = Vec::with_capacity(params.decoder.len());
    for (l, (p, (h, c))) in params.decoder.iter().zip(&state.layers).enumerate() {
        if l > 0 {
            if let Some(dr) = drop.as_mut() {
                let m = dr.mask(x.len());
                x.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
            }
        }
        let s = lstm_cell(&x, h, c, p);
        x = s.h.clone();
        layers.push((s.h, s.c));
    }
    let state = DecoderState { layers };
    let attention = attention(state.top(), enc, gate, params)?;
    let logits = output_logits(state.top(), &attention.context, params);
    let log_probs = log_softmax(&logits);
    Ok(StepOutput {
        logits,
        log_probs,
        attention,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn model(seed: u64) -> ModelParams {
        ModelParams::init_with(ModelConfig::new(12, 10, 8, 2), seed, 0.5).unwrap()
    }

    #[test]
    fn encode_shapes_and_zero_params() {
        let p = model(1);
        assert_eq!(encode(&[4], &p, None).unwrap().len(), 1);
        assert!(encode(&[], &p, None).is_err());
        assert!(encode(&[12], &p, None).is_err());

        let z = ModelParams::zeros(p.config);
        let enc = encode(&[3, 4, 5], &z, None).unwrap();
        assert!(enc.top.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let p = model(2);
        let a = encode(&[3, 7, 5], &p, None).unwrap();
        let b = encode(&[7, 3, 5], &p, None).unwrap();
        assert_ne!(a.top, b.top);
    }

    #[test]
    fn decoder_state_starts_at_zero() {
        let s = init_decoder_state(2, 4);
        assert_eq!(s.layers.len(), 2);
        assert!(s.layers.iter().all(|(h, c)| h.iter().chain(c).all(|v| *v == 0.0)));
    }

    #[test]
    fn closed_gate_context_is_zero() {
        let p = model(3);
        let enc = encode(&[3, 4, 5, 6], &p, None).unwrap();
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let a = attention(&z, &enc, Gate::Closed, &p).unwrap();
        assert!(a.context.iter().all(|v| *v == 0.0));
        let a = attention(&z, &enc, Gate::Open, &p).unwrap();
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.context.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn single_source_position_attends_fully() {
        let p = model(4);
        let enc = encode(&[5], &p, None).unwrap();
        let a = attention(&[0.2; 8], &enc, Gate::Open, &p).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.context, enc.top[0]);
    }

    #[test]
    fn identical_states_give_uniform_attention() {
        let p = model(5);
        let h: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let enc = EncoderStates {
            top: vec![h.clone(); 3],
            proj: project_encoder(&vec![h.clone(); 3], &p),
            finals: vec![],
        };
        let a = attention(&[0.1; 8], &enc, Gate::Open, &p).unwrap();
        for w in &a.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        for (c, e) in a.context.iter().zip(&h) {
            assert!((c - e).abs() < 1e-14);
        }
    }

    #[test]
    fn closed_gate_step_ignores_source() {
        let p = model(6);
        let e1 = encode(&[3, 4, 5], &p, None).unwrap();
        let e2 = encode(&[9, 8, 7, 6, 11], &p, None).unwrap();
        let s0 = init_decoder_state(2, 8);
        let a = decoder_step(1, &s0, &e1, Gate::Closed, &p, None).unwrap();
        let b = decoder_step(1, &s0, &e2, Gate::Closed, &p, None).unwrap();
        assert_eq!(a.log_probs, b.log_probs);
        let total: f64 = a.log_probs.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        let again = decoder_step(1, &s0, &e1, Gate::Closed, &p, None).unwrap();
        assert_eq!(a, again);
    }
}
