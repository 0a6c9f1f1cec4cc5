//! Whole-sentence forward pass with caches, and exact backpropagation
//! through time for the gated, attention-supervised objective.

use super::forward::{
    attend, check_ids, output_logits, project_encoder, run_stack, AttentionTrace, DropoutRng, LayerTrace,
};
use super::{Dropout, ModelParams};
use crate::corpus::SupervisionMatrix;
use crate::error::{Error, Result};
use crate::lstm::{lstm_gate_grads, LstmCellParams};
use crate::tensor::{
    axpy, log_softmax, mat_vec_acc, outer_acc, outer_acc_rows, softmax_backward, transpose, vec_mat_acc,
};
use crate::training::Agreement;
use crate::vocab::{BOS, EOS};

/// Borrowed view of one training example. `gates` has one entry per
/// prediction, i.e. `tgt.len() + 1` including the end symbol.
#[derive(Debug, Clone, Copy)]
pub struct ExampleRef<'a> {
    pub src: &'a [usize],
    pub tgt: &'a [usize],
    pub gates: &'a [bool],
    pub supervision: Option<&'a SupervisionMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub agreement: Agreement,
}

impl Objective {
    pub fn likelihood_only() -> Self {
        Objective {
            lambda: 0.0,
            agreement: Agreement::Mse,
        }
    }
}

/// Per-sentence loss terms. `loss = nll - lambda * agreement` is the
/// quantity minimized, the negated sentence objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub agreement: f64,
    pub loss: f64,
    /// Predictions scored (target length + 1).
    pub tokens: usize,
}

pub(super) fn validate(params: &ModelParams, ex: &ExampleRef) -> Result<()> {
    if ex.src.is_empty() {
        return Err(Error::Validation("empty source sentence".into()));
    }
    check_ids(ex.src, params.config.src_vocab, "source")?;
    check_ids(ex.tgt, params.config.tgt_vocab, "target")?;
    if ex.gates.len() != ex.tgt.len() + 1 {
        return Err(Error::Shape(format!(
            "{} gates for {} target tokens",
            ex.gates.len(),
            ex.tgt.len()
        )));
    }
    if let Some(m) = ex.supervision {
        if m.rows() != ex.tgt.len() || m.cols() != ex.src.len() {
            return Err(Error::Shape(format!(
                "supervision {}x{} for target {} / source {}",
                m.rows(),
                m.cols(),
                ex.tgt.len(),
                ex.src.len()
            )));
        }
    }
    Ok(())
}

struct StepCache {
    attention: Option<AttentionTrace>,
    probs: Vec<f64>,
    target: usize,
    /// Supervision row index when this step enters the agreement term.
    supervised: Option<usize>,
}

/// Computes the sentence loss and, when `grads` is given, accumulates its
/// exact gradient with respect to every parameter.
pub fn forward_backward(
    params: &ModelParams,
    ex: ExampleRef,
    objective: Objective,
    dropout: Option<Dropout>,
    grads: Option<&mut ModelParams>,
) -> Result<LossParts> {
    validate(params, &ex)?;
    let cfg = params.config;
    let d = cfg.hidden;
    let mut drop = DropoutRng::new(dropout);

    // Encoder.
    let enc_in = ex.src.iter().map(|&w| params.src_emb.row(w).to_vec()).collect();
    let enc = run_stack(&params.encoder, enc_in, drop.as_mut());
    let top: Vec<Vec<f64>> = enc
        .last()
        .expect("layers >= 1")
        .steps
        .iter()
        .map(|s| s.h.clone())
        .collect();
    let proj = project_encoder(&top, params);

    // Decoder stack, fed <s> y_1 .. y_T. It never reads the context, so it
    // can run ahead of attention.
    let prev: Vec<usize> = std::iter::once(BOS).chain(ex.tgt.iter().copied()).collect();
    let dec_in = prev.iter().map(|&w| params.tgt_emb.row(w).to_vec()).collect();
    let dec = run_stack(&params.decoder, dec_in, drop.as_mut());
    let dec_top = &dec.last().expect("layers >= 1").steps;

    let zero_ctx = vec![0.0; d];
    let mut nll = 0.0;
    let mut agreement = 0.0;
    let mut steps = Vec::with_capacity(prev.len());
    for (i, step) in dec_top.iter().enumerate() {
        let z = &step.h;
        let open = ex.gates[i];
        let att = open.then(|| attend(z, &top, &proj, super::Gate::Open, params));
        let ctx = att
            .as_ref()
            .map_or(zero_ctx.as_slice(), |a| a.result.context.as_slice());
        let logp = log_softmax(&output_logits(z, ctx, params));
        let target = ex.tgt.get(i).copied().unwrap_or(EOS);
        nll -= logp[target];

        let supervised = match (att.as_ref(), ex.supervision) {
            (Some(a), Some(m)) if i < m.rows() && m.row_is_aligned(i) => {
                agreement += objective.agreement.row_value(&a.result.weights, m.row(i));
                Some(i)
            }
            _ => None,
        };
        steps.push(StepCache {
            attention: att,
            probs: logp.iter().map(|v| v.exp()).collect(),
            target,
            supervised,
        });
    }
    let loss = nll - objective.lambda * agreement;
    let parts = LossParts {
        nll,
        agreement,
        loss,
        tokens: prev.len(),
    };
    let Some(grads) = grads else {
        return Ok(parts);
    };

    // Output layer and attention, per step.
    let v = cfg.tgt_vocab;
    let (w_z, w_c) = params.out_w.data().split_at(d * v);
    let mut d_top = vec![vec![0.0; d]; top.len()];
    let mut d_proj = vec![vec![0.0; cfg.attn_dim]; top.len()];
    let mut d_dec_top = Vec::with_capacity(steps.len());
    for (i, sc) in steps.iter().enumerate() {
        let z = &dec_top[i].h;
        let mut dlogits = sc.probs.clone();
        dlogits[sc.target] -= 1.0;
        axpy(1.0, &dlogits, grads.out_b.data_mut());
        {
            let (g_z, g_c) = grads.out_w.data_mut().split_at_mut(d * v);
            outer_acc(z, &dlogits, g_z);
            if let Some(a) = &sc.attention {
                outer_acc(&a.result.context, &dlogits, g_c);
            }
        }
        let mut dz = vec![0.0; d];
        mat_vec_acc(w_z, &dlogits, &mut dz);

        if let Some(a) = &sc.attention {
            let mut dc = vec![0.0; d];
            mat_vec_acc(w_c, &dlogits, &mut dc);
            let weights = &a.result.weights;
            let mut da: Vec<f64> = top.iter().map(|h| crate::tensor::dot(&dc, h)).collect();
            if let (Some(row), Some(m)) = (sc.supervised, ex.supervision) {
                let g = objective.agreement.row_grad(weights, m.row(row));
                axpy(-objective.lambda, &g, &mut da);
            }
            for (dh, w) in d_top.iter_mut().zip(weights) {
                axpy(*w, &dc, dh);
            }
            let de = softmax_backward(weights, &da);
            let vv = params.att_v.data();
            let mut d_query = vec![0.0; cfg.attn_dim];
            for (j, u) in a.act.iter().enumerate() {
                axpy(de[j], u, grads.att_v.data_mut());
                let dpre: Vec<f64> = u.iter().zip(vv).map(|(uk, vk)| de[j] * vk * (1.0 - uk * uk)).collect();
                axpy(1.0, &dpre, &mut d_query);
                axpy(1.0, &dpre, &mut d_proj[j]);
            }
            outer_acc(z, &d_query, grads.att_dec.data_mut());
            mat_vec_acc(params.att_dec.data(), &d_query, &mut dz);
        }
        d_dec_top.push(dz);
    }

    for (j, h) in top.iter().enumerate() {
        outer_acc(h, &d_proj[j], grads.att_enc.data_mut());
        mat_vec_acc(params.att_enc.data(), &d_proj[j], &mut d_top[j]);
    }

    let d_dec_in = backprop_stack(&params.decoder, &dec, d_dec_top, &mut grads.decoder);
    for (w, g) in prev.iter().zip(&d_dec_in) {
        axpy(1.0, g, grads.tgt_emb.row_mut(*w));
    }
    let d_enc_in = backprop_stack(&params.encoder, &enc, d_top, &mut grads.encoder);
    for (w, g) in ex.src.iter().zip(&d_enc_in) {
        axpy(1.0, g, grads.src_emb.row_mut(*w));
    }
    Ok(parts)
}

/// BPTT through a layer stack given gradients on the top layer's outputs;
/// returns gradients on the first layer's inputs. Weight gradients are
/// accumulated once per layer over all time steps.
fn backprop_stack(
    layers: &[LstmCellParams],
    traces: &[LayerTrace],
    d_top_out: Vec<Vec<f64>>,
    grads: &mut [LstmCellParams],
) -> Vec<Vec<f64>> {
    let mut d_out = d_top_out;
    for l in (0..layers.len()).rev() {
        let (p, tr, g) = (&layers[l], &traces[l], &mut grads[l]);
        let (d, n) = (p.hidden(), tr.steps.len());
        let w_h_t = transpose(p.w_h.data(), d, 4 * d);
        let zeros = vec![0.0; d];
        let mut dh_next = vec![0.0; d];
        let mut dc_next = vec![0.0; d];
        let mut dpres = vec![Vec::new(); n];
        for t in (0..n).rev() {
            let mut dh = std::mem::take(&mut d_out[t]);
            axpy(1.0, &dh_next, &mut dh);
            let c_prev = if t > 0 {
                tr.steps[t - 1].c.as_slice()
            } else {
                zeros.as_slice()
            };
            let (dpre, dc_prev) = lstm_gate_grads(&tr.steps[t], c_prev, &dh, &dc_next);
            dh_next.fill(0.0);
            vec_mat_acc(&dpre, &w_h_t, &mut dh_next);
            dc_next = dc_prev;
            dpres[t] = dpre;
        }

        outer_acc_rows(&tr.inputs, &dpres, g.w_x.data_mut());
        let h_prev: Vec<&[f64]> = tr.steps[..n.saturating_sub(1)].iter().map(|s| s.h.as_slice()).collect();
        outer_acc_rows(&h_prev, &dpres[1..], g.w_h.data_mut());
        for dp in &dpres {
            axpy(1.0, dp, g.b.data_mut());
        }

        let in_dim = p.input_dim();
        let w_x_t = transpose(p.w_x.data(), in_dim, 4 * d);
        d_out = dpres
            .iter()
            .zip(&tr.masks)
            .map(|(dp, mask)| {
                let mut dx = vec![0.0; in_dim];
                vec_mat_acc(dp, &w_x_t, &mut dx);
                if let Some(m) = mask {
                    dx.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
                dx
            })
            .collect();
    }
    d_out
}
