//! Recurrent cells (LSTM and vanilla tanh RNN) with per-step forward and
//! backward, so that callers can build bidirectional encoders and
//! teacher-forced or free-running decoders from the same pieces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::sigmoid;
use super::linalg;
use super::{Module, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Lstm,
    Rnn,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Rnn => 1,
        }
    }
    pub fn has_cell_state(self) -> bool {
        matches!(self, CellKind::Lstm)
    }
}

/// One direction of one recurrent layer. LSTM gate order is i, f, g, o.
#[derive(Debug, Clone)]
pub struct RecurrentLayer {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    /// `gates·hidden × input`
    pub w_ih: Param,
    /// `gates·hidden × hidden`
    pub w_hh: Param,
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-nonlinearity gate values, `batch × gates·hidden`.
    act: Vec<f64>,
    /// `tanh(c)` for LSTM; unused for RNN.
    tanh_c: Vec<f64>,
}

/// Hidden and cell state for a batch, each `batch × hidden`. `c` is empty
/// for RNN cells.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl State {
    pub fn zeros(kind: CellKind, batch: usize, hidden: usize) -> Self {
        Self {
            h: vec![0.0; batch * hidden],
            c: if kind.has_cell_state() { vec![0.0; batch * hidden] } else { Vec::new() },
        }
    }
}

impl RecurrentLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, kind: CellKind, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let g = kind.gates() * hidden;
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            kind,
            input_dim,
            hidden,
            w_ih: Param::uniform(format!("{name}.w_ih"), &[g, input_dim], bound, rng),
            w_hh: Param::uniform(format!("{name}.w_hh"), &[g, hidden], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[g], bound, rng),
        }
    }

    /// Advances one time step for the whole batch.
    pub fn step(&self, x: &[f64], prev: &State, batch: usize) -> (State, StepCache) {
        let hd = self.hidden;
        let g = self.kind.gates() * hd;
        let mut pre = linalg::matmul_nt(x, &self.w_ih.value, Some(&self.bias.value), batch, g, self.input_dim);
        let rec = linalg::matmul_nt(&prev.h, &self.w_hh.value, None, batch, g, hd);
        for (p, r) in pre.iter_mut().zip(&rec) {
            *p += r;
        }
        match self.kind {
            CellKind::Rnn => {
                let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
                let state = State { h: act.clone(), c: Vec::new() };
                let cache = StepCache { x: x.to_vec(), h_prev: prev.h.clone(), c_prev: Vec::new(), act, tanh_c: Vec::new() };
                (state, cache)
            }
            CellKind::Lstm => {
                let mut act = pre;
                let mut h = vec![0.0; batch * hd];
                let mut c = vec![0.0; batch * hd];
                let mut tanh_c = vec![0.0; batch * hd];
                for b in 0..batch {
                    let a = &mut act[b * g..(b + 1) * g];
                    for j in 0..hd {
                        let i = sigmoid(a[j]);
                        let f = sigmoid(a[hd + j]);
                        let gg = a[2 * hd + j].tanh();
                        let o = sigmoid(a[3 * hd + j]);
                        a[j] = i;
                        a[hd + j] = f;
                        a[2 * hd + j] = gg;
                        a[3 * hd + j] = o;
                        let cv = f * prev.c[b * hd + j] + i * gg;
                        let tc = cv.tanh();
                        c[b * hd + j] = cv;
                        tanh_c[b * hd + j] = tc;
                        h[b * hd + j] = o * tc;
                    }
                }
                let cache = StepCache { x: x.to_vec(), h_prev: prev.h.clone(), c_prev: prev.c.clone(), act, tanh_c };
                (State { h, c }, cache)
            }
        }
    }

    /// Backpropagates one step. `dh`/`dc` are gradients w.r.t. this step's
    /// output state (`dc` ignored for RNN). Returns `(dx, d_prev_state)`;
    /// `dx` is skipped when `need_dx` is false.
    pub fn step_backward(
        &mut self,
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
        batch: usize,
        need_dx: bool,
    ) -> (Option<Vec<f64>>, State) {
        let hd = self.hidden;
        let g = self.kind.gates() * hd;
        let mut dpre = vec![0.0; batch * g];
        let mut dc_prev = Vec::new();
        match self.kind {
            CellKind::Rnn => {
                for ((d, &a), &gh) in dpre.iter_mut().zip(&cache.act).zip(dh) {
                    *d = gh * (1.0 - a * a);
                }
            }
            CellKind::Lstm => {
                dc_prev = vec![0.0; batch * hd];
                for b in 0..batch {
                    let a = &cache.act[b * g..(b + 1) * g];
                    let dp = &mut dpre[b * g..(b + 1) * g];
                    for j in 0..hd {
                        let (i, f, gg, o) = (a[j], a[hd + j], a[2 * hd + j], a[3 * hd + j]);
                        let k = b * hd + j;
                        let tc = cache.tanh_c[k];
                        let d_o = dh[k] * tc;
                        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
                        let di = dct * gg;
                        let dg = dct * i;
                        let df = dct * cache.c_prev[k];
                        dc_prev[k] = dct * f;
                        dp[j] = di * i * (1.0 - i);
                        dp[hd + j] = df * f * (1.0 - f);
                        dp[2 * hd + j] = dg * (1.0 - gg * gg);
                        dp[3 * hd + j] = d_o * o * (1.0 - o);
                    }
                }
            }
        }
        linalg::accumulate_outer(&dpre, &cache.x, &mut self.w_ih.grad, batch, g, self.input_dim);
        linalg::accumulate_outer(&dpre, &cache.h_prev, &mut self.w_hh.grad, batch, g, hd);
        linalg::accumulate_column_sums(&dpre, &mut self.bias.grad, batch, g);
        let dx = need_dx.then(|| linalg::matmul_nn(&dpre, &self.w_ih.value, batch, g, self.input_dim));
        let dh_prev = linalg::matmul_nn(&dpre, &self.w_hh.value, batch, g, hd);
        (dx, State { h: dh_prev, c: dc_prev })
    }

    /// Runs over a whole sequence (`xs[t]` is `batch × input`), optionally in
    /// reverse time order. Outputs are indexed by original time position.
    pub fn run(&self, xs: &[Vec<f64>], init: State, batch: usize, reverse: bool) -> SequenceRun {
        let len = xs.len();
        let mut outputs = vec![Vec::new(); len];
        let mut caches: Vec<Option<StepCache>> = (0..len).map(|_| None).collect();
        let mut state = init;
        for s in 0..len {
            let t = if reverse { len - 1 - s } else { s };
            let (next, cache) = self.step(&xs[t], &state, batch);
            outputs[t] = next.h.clone();
            caches[t] = Some(cache);
            state = next;
        }
        SequenceRun {
            outputs,
            caches: caches.into_iter().map(|c| c.expect("every step visited")).collect(),
            final_state: state,
            reverse,
        }
    }

    /// Backpropagation through time for [`run`](Self::run). `d_outputs[t]`
    /// is the gradient on the output at `t`, `d_final` on the final state.
    /// Returns per-step input gradients (if requested) and the gradient on the
    /// initial state.
    pub fn run_backward(
        &mut self,
        run: &SequenceRun,
        d_outputs: Option<&[Vec<f64>]>,
        d_final: State,
        batch: usize,
        need_dx: bool,
    ) -> (Vec<Vec<f64>>, State) {
        let len = run.caches.len();
        let mut dxs = vec![Vec::new(); if need_dx { len } else { 0 }];
        let mut carry = d_final;
        if carry.c.is_empty() && self.kind.has_cell_state() {
            carry.c = vec![0.0; batch * self.hidden];
        }
        for s in (0..len).rev() {
            let t = if run.reverse { len - 1 - s } else { s };
            let mut dh = carry.h.clone();
            if let Some(dout) = d_outputs {
                for (a, b) in dh.iter_mut().zip(&dout[t]) {
                    *a += b;
                }
            }
            let (dx, prev) = self.step_backward(&run.caches[t], &dh, &carry.c, batch, need_dx);
            if let Some(dx) = dx {
                dxs[t] = dx;
            }
            carry = prev;
        }
        (dxs, carry)
    }
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub outputs: Vec<Vec<f64>>,
    pub caches: Vec<StepCache>,
    pub final_state: State,
    pub reverse: bool,
}

impl Module for RecurrentLayer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w_ih);
        f(&self.w_hh);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_ih);
        f(&mut self.w_hh);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_loss(layer: &RecurrentLayer, xs: &[Vec<f64>], reverse: bool) -> f64 {
        let run = layer.run(xs, State::zeros(layer.kind, 2, layer.hidden), 2, reverse);
        let out: f64 = run.outputs.iter().flatten().map(|v| v * v).sum();
        out + run.final_state.h.iter().map(|v| 0.5 * v).sum::<f64>()
    }

    fn check_kind(kind: CellKind, reverse: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut layer = RecurrentLayer::new("r", kind, 3, 4, &mut rng);
        let xs: Vec<Vec<f64>> = (0..5).map(|t| (0..6).map(|i| ((t * 6 + i) as f64 * 0.37).sin()).collect()).collect();
        let run = layer.run(&xs, State::zeros(kind, 2, 4), 2, reverse);
        let d_out: Vec<Vec<f64>> = run.outputs.iter().map(|o| o.iter().map(|v| 2.0 * v).collect()).collect();
        let d_final = State { h: vec![0.5; 8], c: Vec::new() };
        let (dxs, _) = layer.run_backward(&run, Some(&d_out), d_final, 2, true);

        let h = 1e-6;
        for idx in [0, 5, layer.w_ih.len() / 2 + 1, layer.w_ih.len() - 1] {
            let orig = layer.w_ih.value[idx];
            layer.w_ih.value[idx] = orig + h;
            let lp = seq_loss(&layer, &xs, reverse);
            layer.w_ih.value[idx] = orig - h;
            let lm = seq_loss(&layer, &xs, reverse);
            layer.w_ih.value[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = layer.w_ih.grad[idx];
            assert!((num - ana).abs() < 1e-6 * (1.0 + num.abs()), "{kind:?} w_ih[{idx}]: {num} vs {ana}");
        }
        let mut xs2 = xs.clone();
        xs2[2][1] += h;
        let lp = seq_loss(&layer, &xs2, reverse);
        xs2[2][1] -= 2.0 * h;
        let lm = seq_loss(&layer, &xs2, reverse);
        let num = (lp - lm) / (2.0 * h);
        assert!((num - dxs[2][1]).abs() < 1e-6 * (1.0 + num.abs()));
    }

    #[test]
    fn lstm_bptt_matches_finite_differences() {
        check_kind(CellKind::Lstm, false);
        check_kind(CellKind::Lstm, true);
    }

    #[test]
    fn rnn_bptt_matches_finite_differences() {
        check_kind(CellKind::Rnn, false);
        check_kind(CellKind::Rnn, true);
    }
}
