//! Single LSTM cell (no peepholes) with an exact backward pass.
//!
//! Gate pre-activations are laid out `[input, forget, output, candidate]`,
//! each `hidden` wide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, mat_vec_acc, outer_acc, sigmoid, vec_mat_acc, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    /// `[input_dim, 4 * hidden]`
    pub w_x: Tensor,
    /// `[hidden, 4 * hidden]`
    pub w_h: Tensor,
    /// `[4 * hidden]`
    pub b: Tensor,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_x: Tensor::zeros(&[input_dim, 4 * hidden]),
            w_h: Tensor::zeros(&[hidden, 4 * hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Uniform weights in `[-range, range]`, zero biases except the forget
    /// gate, which starts at `forget_bias`.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, range: f64, forget_bias: f64, rng: &mut R) -> Self {
        let w_x = Tensor::uniform(&[input_dim, 4 * hidden], range, rng);
        let w_h = Tensor::uniform(&[hidden, 4 * hidden], range, rng);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = forget_bias);
        LstmCellParams { w_x, w_h, b }
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[0]
    }

    pub fn check(&self) -> Result<()> {
        let d = self.hidden();
        if self.w_h.shape() != [d, 4 * d] || self.w_x.shape().get(1) != Some(&(4 * d)) || self.b.len() != 4 * d {
            return Err(Error::Shape(format!(
                "lstm params w_x {:?} w_h {:?} b {:?}",
                self.w_x.shape(),
                self.w_h.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

/// Forward activations of one cell application, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmStep {
    /// Activated gates `[i, f, o, g]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

/// Gradients flowing out of a cell to its inputs.
#[derive(Debug, Clone)]
pub struct LstmInputGrads {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
}

pub fn lstm_cell(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmCellParams) -> LstmStep {
    let d = p.hidden();
    let mut pre = p.b.data().to_vec();
    vec_mat_acc(x, p.w_x.data(), &mut pre);
    vec_mat_acc(h_prev, p.w_h.data(), &mut pre);

    let mut gates = pre;
    for v in &mut gates[..3 * d] {
        *v = sigmoid(*v);
    }
    for v in &mut gates[3 * d..] {
        *v = v.tanh();
    }
    let (i, rest) = gates.split_at(d);
    let (f, rest) = rest.split_at(d);
    let (o, g) = rest.split_at(d);

    let mut c = vec![0.0; d];
    let mut tanh_c = vec![0.0; d];
    let mut h = vec![0.0; d];
    for k in 0..d {
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
    LstmStep { gates, c, tanh_c, h }
}

/// Shape-checked entry point for [`lstm_cell`].
pub fn lstm_cell_checked(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmCellParams) -> Result<LstmStep> {
    p.check()?;
    let d = p.hidden();
    if x.len() != p.input_dim() || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::Shape(format!(
            "lstm inputs x {} h {} c {} for input {} hidden {d}",
            x.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim()
        )));
    }
    Ok(lstm_cell(x, h_prev, c_prev, p))
}

/// Gradients on the gate pre-activations and on the previous cell state,
/// given the total upstream gradients `dh` and `dc` on this step's outputs.
pub fn lstm_gate_grads(step: &LstmStep, c_prev: &[f64], dh: &[f64], dc: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = step.c.len();
    let g = &step.gates;
    let mut dpre = vec![0.0; 4 * d];
    let mut dc_prev = vec![0.0; d];
    for k in 0..d {
        let (i, f, o, cand) = (g[k], g[d + k], g[2 * d + k], g[3 * d + k]);
        let tc = step.tanh_c[k];
        let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
        let d_o = dh[k] * tc;
        let d_i = dck * cand;
        let d_g = dck * i;
        let d_f = dck * c_prev[k];
        dc_prev[k] = dck * f;
        dpre[k] = d_i * i * (1.0 - i);
        dpre[d + k] = d_f * f * (1.0 - f);
        dpre[2 * d + k] = d_o * o * (1.0 - o);
        dpre[3 * d + k] = d_g * (1.0 - cand * cand);
    }
    (dpre, dc_prev)
}

/// Backward through one cell. `dh` and `dc` are the total upstream
/// gradients on this step's outputs. Parameter gradients accumulate into
/// `grads`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward(
    step: &LstmStep,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmCellParams,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmCellParams,
) -> LstmInputGrads {
    let (dpre, dc_prev) = lstm_gate_grads(step, c_prev, dh, dc);
    outer_acc(x, &dpre, grads.w_x.data_mut());
    outer_acc(h_prev, &dpre, grads.w_h.data_mut());
    axpy(1.0, &dpre, grads.b.data_mut());

    let mut dx = vec![0.0; x.len()];
    mat_vec_acc(p.w_x.data(), &dpre, &mut dx);
    let mut dh_prev = vec![0.0; p.hidden()];
    mat_vec_acc(p.w_h.data(), &dpre, &mut dh_prev);
    LstmInputGrads {
        x: dx,
        h_prev: dh_prev,
        c_prev: dc_prev,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradient_check, ParamSlot};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_zero_state_gives_zero() {
        let p = LstmCellParams::zeros(3, 4);
        let s = lstm_cell(&[0.0; 3], &[0.0; 4], &[0.0; 4], &p);
        assert!(s.h.iter().chain(&s.c).all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LstmCellParams::init(3, 3, 0.1, 0.0, &mut rng);
        p.b.data_mut()[3..6].iter_mut().for_each(|v| *v = 60.0);
        let x = [0.3, -0.2, 0.9];
        let h_prev = [0.1, 0.2, -0.3];
        let c_prev = [1.5, -0.5, 0.25];
        let s = lstm_cell(&x, &h_prev, &c_prev, &p);
        for (k, c_prev) in c_prev.iter().enumerate() {
            let input_term = s.gates[k] * s.gates[9 + k];
            assert!((s.c[k] - (c_prev + input_term)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = LstmCellParams::zeros(3, 2);
        assert!(lstm_cell_checked(&[0.0; 2], &[0.0; 2], &[0.0; 2], &p).is_err());
    }

    /// Scalar test loss: weighted sums of h and c so every output matters.
    fn cell_loss(p: &LstmCellParams, x: &[f64], h0: &[f64], c0: &[f64], wh: &[f64], wc: &[f64]) -> f64 {
        let s = lstm_cell(x, h0, c0, p);
        crate::tensor::dot(&s.h, wh) + crate::tensor::dot(&s.c, wc)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3;
        let p = LstmCellParams::init(d, d, 0.8, 1.0, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wh: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let step = lstm_cell(&x, &h0, &c0, &p);
        let mut grads = LstmCellParams::zeros(d, d);
        let ig = lstm_cell_backward(&step, &x, &h0, &c0, &p, &wh, &wc, &mut grads);

        // Parameters plus the three inputs, all as one flat vector.
        let mut theta = [p.w_x.data(), p.w_h.data(), p.b.data(), &x, &h0, &c0].concat();
        let analytic = [
            grads.w_x.data(),
            grads.w_h.data(),
            grads.b.data(),
            &ig.x,
            &ig.h_prev,
            &ig.c_prev,
        ]
        .concat();
        let n_wx = p.w_x.len();
        let n_wh = p.w_h.len();
        let n_b = p.b.len();
        let unpack = |t: &[f64]| {
            let mut q = p.clone();
            q.w_x.data_mut().copy_from_slice(&t[..n_wx]);
            q.w_h.data_mut().copy_from_slice(&t[n_wx..n_wx + n_wh]);
            q.b.data_mut().copy_from_slice(&t[n_wx + n_wh..n_wx + n_wh + n_b]);
            let o = n_wx + n_wh + n_b;
            (
                q,
                t[o..o + d].to_vec(),
                t[o + d..o + 2 * d].to_vec(),
                t[o + 2 * d..o + 3 * d].to_vec(),
            )
        };
        let report = gradient_check(
            |t| {
                let (q, x, h, c) = unpack(t);
                Ok(cell_loss(&q, &x, &h, &c, &wh, &wc))
            },
            &mut theta,
            &analytic,
            &[ParamSlot::new("all", 0, analytic.len())],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
