//! A second, deliberately plain implementation of the sentence loss,
//! generic over the scalar type. It shares no kernels with the training
//! path and keeps no caches, so it serves as the oracle for gradient checks
//! (evaluated in double-double) and as a cross-check of the fast forward
//! pass (evaluated in `f64`).

use super::backprop::validate;
use super::forward::DropoutRng;
use super::{forward_backward, Dropout, ExampleRef, ModelParams, Objective};
use crate::error::Result;
use crate::gradcheck::{gradient_check, GradCheckReport};
use crate::lstm::LstmCellParams;
use crate::real::{Dd, Real};
use crate::training::Agreement;
use crate::vocab::{BOS, EOS};

/// `y + x W` for row-major `w` of shape `[x.len(), y.len()]`.
fn affine<R: Real>(x: &[R], w: &[f64], bias: Option<&[f64]>) -> Vec<R> {
    let cols = w.len() / x.len().max(1);
    (0..cols)
        .map(|c| {
            let mut acc = bias.map_or(R::zero(), |b| R::from(b[c]));
            for (r, xv) in x.iter().enumerate() {
                acc += *xv * R::from(w[r * cols + c]);
            }
            acc
        })
        .collect()
}

fn lift<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::from(x)).collect()
}

fn run_layers<R: Real>(
    layers: &[LstmCellParams],
    mut xs: Vec<Vec<R>>,
    mut drop: Option<&mut DropoutRng>,
) -> Vec<Vec<R>> {
    for (l, p) in layers.iter().enumerate() {
        let d = p.hidden();
        if l > 0 {
            if let Some(dr) = drop.as_deref_mut() {
                for x in xs.iter_mut() {
                    let mask = dr.mask(x.len());
                    for (v, m) in x.iter_mut().zip(mask) {
                        *v = *v * R::from(m);
                    }
                }
            }
        }
        let mut h = vec![R::zero(); d];
        let mut c = vec![R::zero(); d];
        let mut out = Vec::with_capacity(xs.len());
        for x in &xs {
            let a = affine(x, p.w_x.data(), Some(p.b.data()));
            let b = affine(&h, p.w_h.data(), None);
            let pre: Vec<R> = a.into_iter().zip(b).map(|(u, v)| u + v).collect();
            for k in 0..d {
                let i = pre[k].sigmoid();
                let f = pre[d + k].sigmoid();
                let o = pre[2 * d + k].sigmoid();
                let g = pre[3 * d + k].tanh();
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
            out.push(h.clone());
        }
        xs = out;
    }
    xs
}

fn log_softmax<R: Real>(x: &[R]) -> Vec<R> {
    let m = x.iter().copied().fold(x[0], R::max);
    let mut sum = R::zero();
    for v in x {
        sum += (*v - m).exp();
    }
    let lse = m + sum.ln();
    x.iter().map(|v| *v - lse).collect()
}

/// The minimized loss `nll - λ·Δ` of one example, evaluated in `R`.
/// Dropout masks are drawn in the same order as the training path.
pub fn reference_loss<R: Real>(
    params: &ModelParams,
    ex: ExampleRef,
    objective: Objective,
    dropout: Option<Dropout>,
) -> Result<R> {
    validate(params, &ex)?;
    let cfg = params.config;
    let (d, v) = (cfg.hidden, cfg.tgt_vocab);
    let mut drop = DropoutRng::new(dropout);

    let src: Vec<Vec<R>> = ex.src.iter().map(|&w| lift(params.src_emb.row(w))).collect();
    let top = run_layers(&params.encoder, src, drop.as_mut());
    let keys: Vec<Vec<R>> = top.iter().map(|h| affine(h, params.att_enc.data(), None)).collect();

    let prev: Vec<usize> = std::iter::once(BOS).chain(ex.tgt.iter().copied()).collect();
    let tgt: Vec<Vec<R>> = prev.iter().map(|&w| lift(params.tgt_emb.row(w))).collect();
    let dec = run_layers(&params.decoder, tgt, drop.as_mut());

    let (w_z, w_c) = params.out_w.data().split_at(d * v);
    let mut nll = R::zero();
    let mut delta = R::zero();
    for (i, z) in dec.iter().enumerate() {
        let mut logits = affine(z, w_z, Some(params.out_b.data()));
        if ex.gates[i] {
            let q = affine(z, params.att_dec.data(), None);
            let scores: Vec<R> = keys
                .iter()
                .map(|k| {
                    let mut e = R::zero();
                    for ((qa, ka), va) in q.iter().zip(k).zip(params.att_v.data()) {
                        e += R::from(*va) * (*qa + *ka).tanh();
                    }
                    e
                })
                .collect();
            let weights: Vec<R> = log_softmax(&scores).into_iter().map(R::exp).collect();
            let mut ctx = vec![R::zero(); d];
            for (a, h) in weights.iter().zip(&top) {
                for (c, hv) in ctx.iter_mut().zip(h) {
                    *c += *a * *hv;
                }
            }
            for (l, c) in logits.iter_mut().zip(affine(&ctx, w_c, None)) {
                *l += c;
            }
            if let Some(m) = ex.supervision {
                if i < m.rows() && m.row_is_aligned(i) {
                    for (a, &prior) in weights.iter().zip(m.row(i)) {
                        let p = R::from(prior as f64);
                        delta += match objective.agreement {
                            Agreement::Mul => *a * p,
                            Agreement::Mse => -R::from(0.5) * (*a - p) * (*a - p),
                        };
                    }
                }
            }
        }
        let target = ex.tgt.get(i).copied().unwrap_or(EOS);
        nll -= log_softmax(&logits)[target];
    }
    Ok(nll - R::from(objective.lambda) * delta)
}

/// Analytic gradients of one example against central differences of the
/// double-double reference loss.
pub fn check_gradients(
    params: &ModelParams,
    ex: ExampleRef,
    objective: Objective,
    dropout: Option<Dropout>,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut grads = params.zeros_like();
    forward_backward(params, ex, objective, dropout, Some(&mut grads))?;
    let mut theta = params.flatten();
    let mut probe = params.clone();
    gradient_check(
        |t| {
            probe.set_flat(t)?;
            reference_loss::<Dd>(&probe, ex, objective, dropout)
        },
        &mut theta,
        &grads.flatten(),
        &params.slots(),
        eps,
    )
}

/// A self-contained gradient check on a random pair with two aligned
/// spans, so some decoder positions have the context gate open and some
/// closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub hidden: usize,
    pub layers: usize,
    /// Words per side, reserved symbols included.
    pub vocab: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub objective: Objective,
    pub seed: u64,
    pub eps: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            hidden: 8,
            layers: 2,
            vocab: 20,
            src_len: 6,
            tgt_len: 6,
            objective: Objective {
                lambda: 0.3,
                agreement: Agreement::Mse,
            },
            seed: 1,
            eps: 1e-5,
        }
    }
}

pub fn random_gradient_check(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};

    use crate::corpus::{supervision_matrix, PartiallyAlignedPair, Span, SpanPair};
    use crate::error::Error;
    use crate::model::ModelConfig;
    use crate::vocab::RESERVED;

    let GradCheckSetup {
        src_len: sl,
        tgt_len: tl,
        ..
    } = *setup;
    if sl < 5 || tl < 5 || setup.vocab <= RESERVED {
        return Err(Error::Validation(format!(
            "gradient check needs lengths >= 5 and more than {RESERVED} words, got {sl}/{tl} and {}",
            setup.vocab
        )));
    }
    let params = ModelParams::init(
        ModelConfig::new(setup.vocab, setup.vocab, setup.hidden, setup.layers),
        setup.seed,
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9e37_79b9);
    let mut words = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(RESERVED..setup.vocab)).collect() };
    let (src, tgt) = (words(sl), words(tl));
    let pair = PartiallyAlignedPair {
        ids: None,
        source: vec![String::new(); sl],
        target: vec![String::new(); tl],
        aligned: vec![
            SpanPair {
                k: 0,
                src: Span::new(1, 3),
                tgt: Span::new(0, 2),
            },
            SpanPair {
                k: 1,
                src: Span::new(sl - 2, sl),
                tgt: Span::new(tl - 3, tl - 1),
            },
        ],
    };
    let sup = supervision_matrix(&pair);
    let gates: Vec<bool> = (0..=tl).map(|i| i < tl && sup.row_is_aligned(i)).collect();
    let ex = ExampleRef {
        src: &src,
        tgt: &tgt,
        gates: &gates,
        supervision: Some(&sup),
    };
    check_gradients(&params, ex, setup.objective, None, setup.eps)
}
