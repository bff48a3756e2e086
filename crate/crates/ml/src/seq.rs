//! Recurrent sequence classifier.
//!
//! Per-step features pass through a time-distributed MLP (256 hidden units,
//! rectifier, 128-dimensional embedding). A first LSTM transforms the
//! embedded sequence; three further LSTMs consume its output sequence: one
//! mean-pooled over time, one contributing its final state, one max-pooled.
//! The pooled vectors are concatenated into a second MLP with a 4-way
//! softmax head. All LSTMs carry 128 hidden units.
//!
//! Training uses categorical cross entropy, Adam with an initial rate of
//! 0.002 halved by sqrt(2) after 3 epochs without validation improvement,
//! early stopping after 15, batches of 32 sequences, L2 strength 1e-4 and
//! per-layer dropout. Everything is seeded and single-threaded, so a
//! training run is bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{softmax, MlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqConfig {
    pub input_dim: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub out_hidden: usize,
    pub n_classes: usize,
    pub dropout_mlp: f64,
    pub dropout_lstm0_input: f64,
    pub dropout_lstm0_recurrent: f64,
    pub dropout_lstm_input: f64,
    pub dropout_lstm_recurrent: f64,
    pub l2: f64,
}

impl SeqConfig {
    /// The published architecture and regularization for a given input width.
    pub fn standard(input_dim: usize) -> SeqConfig {
        SeqConfig {
            input_dim,
            mlp_hidden: 256,
            embed_dim: 128,
            lstm_hidden: 128,
            out_hidden: 256,
            n_classes: 4,
            dropout_mlp: 0.25,
            dropout_lstm0_input: 0.22,
            dropout_lstm0_recurrent: 0.44,
            dropout_lstm_input: 0.35,
            dropout_lstm_recurrent: 0.36,
            l2: 1e-4,
        }
    }

    /// A tiny variant of the same wiring, for gradient checks and fast tests.
    pub fn micro(input_dim: usize) -> SeqConfig {
        SeqConfig {
            input_dim,
            mlp_hidden: 5,
            embed_dim: 4,
            lstm_hidden: 3,
            out_hidden: 5,
            n_classes: 4,
            dropout_mlp: 0.0,
            dropout_lstm0_input: 0.0,
            dropout_lstm0_recurrent: 0.0,
            dropout_lstm_input: 0.0,
            dropout_lstm_recurrent: 0.0,
            l2: 1e-4,
        }
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    mlp_w1: std::ops::Range<usize>,
    mlp_b1: std::ops::Range<usize>,
    mlp_w2: std::ops::Range<usize>,
    mlp_b2: std::ops::Range<usize>,
    /// (wx, wh, b, input_dim) per LSTM.
    lstm: Vec<(std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>, usize)>,
    out_w1: std::ops::Range<usize>,
    out_b1: std::ops::Range<usize>,
    out_w2: std::ops::Range<usize>,
    out_b2: std::ops::Range<usize>,
    total: usize,
}

impl SeqConfig {
    fn layout(&self) -> Layout {
        let mut off = 0usize;
        let mut take = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let h = self.lstm_hidden;
        let mlp_w1 = take(self.mlp_hidden * self.input_dim);
        let mlp_b1 = take(self.mlp_hidden);
        let mlp_w2 = take(self.embed_dim * self.mlp_hidden);
        let mlp_b2 = take(self.embed_dim);
        let mut lstm = Vec::with_capacity(4);
        for l in 0..4 {
            let in_dim = if l == 0 { self.embed_dim } else { h };
            let wx = take(4 * h * in_dim);
            let wh = take(4 * h * h);
            let b = take(4 * h);
            lstm.push((wx, wh, b, in_dim));
        }
        let out_w1 = take(self.out_hidden * 3 * h);
        let out_b1 = take(self.out_hidden);
        let out_w2 = take(self.n_classes * self.out_hidden);
        let out_b2 = take(self.n_classes);
        Layout {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            lstm,
            out_w1,
            out_b1,
            out_w2,
            out_b2,
            total: off,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Ranges of the weight matrices (biases excluded), for L2.
    fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let l = self.layout();
        let mut out = vec![l.mlp_w1, l.mlp_w2, l.out_w1, l.out_w2];
        for (wx, wh, _, _) in &l.lstm {
            out.push(wx.clone());
            out.push(wh.clone());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Linear algebra kernels
// ---------------------------------------------------------------------------

/// Dot product with four independent accumulators so the reduction
/// vectorizes; the summation order is fixed, keeping results reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out = W x, W row-major (rows x cols).
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        out[r] += dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// dx += W^T dy.
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, a) in dx.iter_mut().zip(row) {
            *d += g * a;
        }
    }
}

/// dW += dy ⊗ x.
fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for (d, a) in drow.iter_mut().zip(x) {
            *d += g * a;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Dropout masks
// ---------------------------------------------------------------------------

/// Inverted-dropout masks, one set per sequence, constant across timesteps.
struct Masks {
    mlp_hidden: Vec<f64>,
    out_hidden: Vec<f64>,
    lstm_input: Vec<Vec<f64>>,
    lstm_recurrent: Vec<Vec<f64>>,
}

impl Masks {
    fn ones(cfg: &SeqConfig) -> Masks {
        let h = cfg.lstm_hidden;
        Masks {
            mlp_hidden: vec![1.0; cfg.mlp_hidden],
            out_hidden: vec![1.0; cfg.out_hidden],
            lstm_input: vec![
                vec![1.0; cfg.embed_dim],
                vec![1.0; h],
                vec![1.0; h],
                vec![1.0; h],
            ],
            lstm_recurrent: (0..4).map(|_| vec![1.0; h]).collect(),
        }
    }

    fn sample(cfg: &SeqConfig, rng: &mut ChaCha20Rng) -> Masks {
        let draw = |rng: &mut ChaCha20Rng, n: usize, p: f64| -> Vec<f64> {
            let keep = 1.0 - p;
            (0..n)
                .map(|_| {
                    if p <= 0.0 || rng.gen::<f64>() < keep {
                        1.0 / keep.max(1e-12)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let h = cfg.lstm_hidden;
        let mut lstm_input = Vec::with_capacity(4);
        let mut lstm_recurrent = Vec::with_capacity(4);
        for l in 0..4 {
            let (pi, pr) = if l == 0 {
                (cfg.dropout_lstm0_input, cfg.dropout_lstm0_recurrent)
            } else {
                (cfg.dropout_lstm_input, cfg.dropout_lstm_recurrent)
            };
            let in_dim = if l == 0 { cfg.embed_dim } else { h };
            lstm_input.push(draw(rng, in_dim, pi));
            lstm_recurrent.push(draw(rng, h, pr));
        }
        Masks {
            mlp_hidden: draw(rng, cfg.mlp_hidden, cfg.dropout_mlp),
            out_hidden: draw(rng, cfg.out_hidden, cfg.dropout_mlp),
            lstm_input,
            lstm_recurrent,
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Everything the backward pass needs from one forward run.
struct Cache {
    t_len: usize,
    /// Standardized inputs, T x input_dim.
    x: Vec<f64>,
    /// MLP hidden activations after ReLU and dropout, T x mlp_hidden.
    h1: Vec<f64>,
    /// Per LSTM: gate activations (T x 4H), cell states (T x H),
    /// hidden states (T x H), dropped inputs (T x in_dim).
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    /// Pooling bookkeeping.
    max_arg: Vec<usize>,
    /// Concatenated pooled vector (3H).
    pooled: Vec<f64>,
    /// Output MLP hidden after ReLU and dropout.
    g_hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn lstm_forward(
    params: &[f64],
    wx: &std::ops::Range<usize>,
    wh: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
    in_dim: usize,
    h_dim: usize,
    t_len: usize,
    input: &[f64],           // T x in_dim (already dropped)
    gates: &mut Vec<f64>,    // T x 4H
    cells: &mut Vec<f64>,    // T x H
    hidden: &mut Vec<f64>,   // T x H
    rec_mask: &[f64],
) {
    let wx = &params[wx.clone()];
    let wh = &params[wh.clone()];
    let b = &params[b.clone()];
    gates.clear();
    gates.resize(t_len * 4 * h_dim, 0.0);
    cells.clear();
    cells.resize(t_len * h_dim, 0.0);
    hidden.clear();
    hidden.resize(t_len * h_dim, 0.0);

    let mut h_prev = vec![0.0f64; h_dim];
    let mut c_prev = vec![0.0f64; h_dim];
    let mut pre = vec![0.0f64; 4 * h_dim];
    let mut h_dropped = vec![0.0f64; h_dim];
    for t in 0..t_len {
        pre.copy_from_slice(b);
        matvec(wx, 4 * h_dim, in_dim, &input[t * in_dim..(t + 1) * in_dim], &mut pre);
        for k in 0..h_dim {
            h_dropped[k] = h_prev[k] * rec_mask[k];
        }
        matvec(wh, 4 * h_dim, h_dim, &h_dropped, &mut pre);
        let gt = &mut gates[t * 4 * h_dim..(t + 1) * 4 * h_dim];
        for k in 0..h_dim {
            let i = sigmoid(pre[k]);
            let f = sigmoid(pre[h_dim + k]);
            let g = pre[2 * h_dim + k].tanh();
            let o = sigmoid(pre[3 * h_dim + k]);
            gt[k] = i;
            gt[h_dim + k] = f;
            gt[2 * h_dim + k] = g;
            gt[3 * h_dim + k] = o;
            let c = f * c_prev[k] + i * g;
            cells[t * h_dim + k] = c;
            let h = o * c.tanh();
            hidden[t * h_dim + k] = h;
        }
        h_prev.copy_from_slice(&hidden[t * h_dim..(t + 1) * h_dim]);
        c_prev.copy_from_slice(&cells[t * h_dim..(t + 1) * h_dim]);
    }
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    params: &[f64],
    grad: &mut [f64],
    wx_r: &std::ops::Range<usize>,
    wh_r: &std::ops::Range<usize>,
    b_r: &std::ops::Range<usize>,
    in_dim: usize,
    h_dim: usize,
    t_len: usize,
    input: &[f64],
    gates: &[f64],
    cells: &[f64],
    hidden: &[f64],
    rec_mask: &[f64],
    dh_seq: &[f64],      // T x H upstream gradient on h_t
    dinput: &mut [f64],  // T x in_dim accumulated gradient on the (dropped) input
) {
    let wx = params[wx_r.clone()].to_vec();
    let wh = params[wh_r.clone()].to_vec();
    let mut dwx = vec![0.0f64; wx.len()];
    let mut dwh = vec![0.0f64; wh.len()];
    let mut db = vec![0.0f64; 4 * h_dim];

    let mut dh_next = vec![0.0f64; h_dim];
    let mut dc_next = vec![0.0f64; h_dim];
    let mut dpre = vec![0.0f64; 4 * h_dim];
    let mut h_dropped = vec![0.0f64; h_dim];
    for t in (0..t_len).rev() {
        let gt = &gates[t * 4 * h_dim..(t + 1) * 4 * h_dim];
        let ct = &cells[t * h_dim..(t + 1) * h_dim];
        for k in 0..h_dim {
            let dh = dh_seq[t * h_dim + k] + dh_next[k];
            let i = gt[k];
            let f = gt[h_dim + k];
            let g = gt[2 * h_dim + k];
            let o = gt[3 * h_dim + k];
            let tc = ct[k].tanh();
            let c_prev = if t > 0 { cells[(t - 1) * h_dim + k] } else { 0.0 };
            let mut dc = dc_next[k] + dh * o * (1.0 - tc * tc);
            let d_o = dh * tc;
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = dc * c_prev;
            dc *= f;
            dc_next[k] = dc;
            dpre[k] = d_i * i * (1.0 - i);
            dpre[h_dim + k] = d_f * f * (1.0 - f);
            dpre[2 * h_dim + k] = d_g * (1.0 - g * g);
            dpre[3 * h_dim + k] = d_o * o * (1.0 - o);
        }
        let xt = &input[t * in_dim..(t + 1) * in_dim];
        outer_acc(&mut dwx, 4 * h_dim, in_dim, &dpre, xt);
        if t > 0 {
            for k in 0..h_dim {
                h_dropped[k] = hidden[(t - 1) * h_dim + k] * rec_mask[k];
            }
            outer_acc(&mut dwh, 4 * h_dim, h_dim, &dpre, &h_dropped);
        }
        for k in 0..4 * h_dim {
            db[k] += dpre[k];
        }
        matvec_t_acc(&wx, 4 * h_dim, in_dim, &dpre, &mut dinput[t * in_dim..(t + 1) * in_dim]);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if t > 0 {
            matvec_t_acc(&wh, 4 * h_dim, h_dim, &dpre, &mut dh_next);
            for k in 0..h_dim {
                dh_next[k] *= rec_mask[k];
            }
        }
    }
    grad[wx_r.clone()].iter_mut().zip(&dwx).for_each(|(a, b)| *a += b);
    grad[wh_r.clone()].iter_mut().zip(&dwh).for_each(|(a, b)| *a += b);
    grad[b_r.clone()].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
}

fn forward(cfg: &SeqConfig, params: &[f64], seq: &[Vec<f64>], masks: &Masks) -> Cache {
    let lay = cfg.layout();
    let t_len = seq.len();
    let (d, m, e, h) = (cfg.input_dim, cfg.mlp_hidden, cfg.embed_dim, cfg.lstm_hidden);

    let mut x = vec![0.0f64; t_len * d];
    for (t, row) in seq.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(row);
    }

    // Time-distributed input MLP.
    let mut h1 = vec![0.0f64; t_len * m];
    let mut embed = vec![0.0f64; t_len * e];
    for t in 0..t_len {
        let ht = &mut h1[t * m..(t + 1) * m];
        ht.copy_from_slice(&params[lay.mlp_b1.clone()]);
        matvec(&params[lay.mlp_w1.clone()], m, d, &x[t * d..(t + 1) * d], ht);
        for (k, v) in ht.iter_mut().enumerate() {
            *v = v.max(0.0) * masks.mlp_hidden[k];
        }
        let et = &mut embed[t * e..(t + 1) * e];
        et.copy_from_slice(&params[lay.mlp_b2.clone()]);
        matvec(&params[lay.mlp_w2.clone()], e, m, &h1[t * m..(t + 1) * m], et);
    }

    let mut gates = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut cells = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut hidden = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(4);

    // LSTM0 consumes the (dropped) embedding.
    let mut in0 = vec![0.0f64; t_len * e];
    for t in 0..t_len {
        for k in 0..e {
            in0[t * e + k] = embed[t * e + k] * masks.lstm_input[0][k];
        }
    }
    {
        let (wx, wh, b, in_dim) = &lay.lstm[0];
        lstm_forward(
            params, wx, wh, b, *in_dim, h, t_len, &in0, &mut gates[0], &mut cells[0],
            &mut hidden[0], &masks.lstm_recurrent[0],
        );
    }
    inputs.push(in0);

    // LSTMs 1..3 consume the (dropped) output sequence of LSTM0.
    for l in 1..4 {
        let mut inl = vec![0.0f64; t_len * h];
        for t in 0..t_len {
            for k in 0..h {
                inl[t * h + k] = hidden[0][t * h + k] * masks.lstm_input[l][k];
            }
        }
        let (wx, wh, b, in_dim) = &lay.lstm[l];
        let (head, tail) = hidden.split_at_mut(l);
        let src = &head[0];
        let _ = src;
        lstm_forward(
            params,
            wx,
            wh,
            b,
            *in_dim,
            h,
            t_len,
            &inl,
            &mut gates[l],
            &mut cells[l],
            &mut tail[0],
            &masks.lstm_recurrent[l],
        );
        inputs.push(inl);
    }

    // Pooling: mean of LSTM1, final state of LSTM2, max of LSTM3.
    let mut pooled = vec![0.0f64; 3 * h];
    for t in 0..t_len {
        for k in 0..h {
            pooled[k] += hidden[1][t * h + k] / t_len as f64;
        }
    }
    pooled[h..2 * h].copy_from_slice(&hidden[2][(t_len - 1) * h..t_len * h]);
    let mut max_arg = vec![0usize; h];
    for k in 0..h {
        let mut best_t = 0usize;
        let mut best = hidden[3][k];
        for t in 1..t_len {
            let v = hidden[3][t * h + k];
            if v > best {
                best = v;
                best_t = t;
            }
        }
        pooled[2 * h + k] = best;
        max_arg[k] = best_t;
    }

    // Output MLP.
    let mut g_hidden = params[lay.out_b1.clone()].to_vec();
    matvec(&params[lay.out_w1.clone()], cfg.out_hidden, 3 * h, &pooled, &mut g_hidden);
    for (k, v) in g_hidden.iter_mut().enumerate() {
        *v = v.max(0.0) * masks.out_hidden[k];
    }
    let mut logits = params[lay.out_b2.clone()].to_vec();
    matvec(&params[lay.out_w2.clone()], cfg.n_classes, cfg.out_hidden, &g_hidden, &mut logits);

    Cache {
        t_len,
        x,
        h1,
        gates,
        cells,
        hidden,
        inputs,
        max_arg,
        pooled,
        g_hidden,
        logits,
    }
}

/// Cross-entropy loss of one sequence plus the L2 penalty on the weights.
pub fn sequence_loss(cfg: &SeqConfig, params: &[f64], seq: &[Vec<f64>], label: usize) -> f64 {
    let masks = Masks::ones(cfg);
    let cache = forward(cfg, params, seq, &masks);
    let p = softmax(&cache.logits);
    let ce = -(p[label].max(1e-300)).ln();
    ce + l2_penalty(cfg, params)
}

fn l2_penalty(cfg: &SeqConfig, params: &[f64]) -> f64 {
    if cfg.l2 == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in cfg.weight_ranges() {
        for v in &params[r] {
            acc += v * v;
        }
    }
    0.5 * cfg.l2 * acc
}

/// Analytic loss and gradient for one sequence (dropout off). Used directly
/// by the finite-difference checks and, with masks, by training.
pub fn sequence_loss_grad(
    cfg: &SeqConfig,
    params: &[f64],
    seq: &[Vec<f64>],
    label: usize,
) -> (f64, Vec<f64>) {
    let masks = Masks::ones(cfg);
    let mut grad = vec![0.0f64; params.len()];
    let loss = backward_into(cfg, params, seq, label, &masks, &mut grad, 1.0);
    // L2 term.
    for r in cfg.weight_ranges() {
        for k in r {
            grad[k] += cfg.l2 * params[k];
        }
    }
    (loss + l2_penalty(cfg, params), grad)
}

/// Runs forward+backward for one sequence, accumulating `scale` times the
/// cross-entropy gradient into `grad`. Returns the (unscaled) cross entropy.
fn backward_into(
    cfg: &SeqConfig,
    params: &[f64],
    seq: &[Vec<f64>],
    label: usize,
    masks: &Masks,
    grad: &mut [f64],
    scale: f64,
) -> f64 {
    let lay = cfg.layout();
    let (d, m, e, h) = (cfg.input_dim, cfg.mlp_hidden, cfg.embed_dim, cfg.lstm_hidden);
    let cache = forward(cfg, params, seq, masks);
    let t_len = cache.t_len;
    let p = softmax(&cache.logits);
    let ce = -(p[label].max(1e-300)).ln();

    // d logits
    let mut dlogits = p;
    dlogits[label] -= 1.0;
    for v in dlogits.iter_mut() {
        *v *= scale;
    }

    // Output MLP backward.
    let mut dg = vec![0.0f64; cfg.out_hidden];
    outer_acc(
        &mut grad[lay.out_w2.clone()],
        cfg.n_classes,
        cfg.out_hidden,
        &dlogits,
        &cache.g_hidden,
    );
    grad[lay.out_b2.clone()]
        .iter_mut()
        .zip(&dlogits)
        .for_each(|(a, b)| *a += b);
    matvec_t_acc(&params[lay.out_w2.clone()], cfg.n_classes, cfg.out_hidden, &dlogits, &mut dg);
    for k in 0..cfg.out_hidden {
        // Through dropout and ReLU: g_hidden = relu(pre) * mask.
        dg[k] *= masks.out_hidden[k];
        if cache.g_hidden[k] <= 0.0 {
            dg[k] = 0.0;
        }
    }
    let mut dpooled = vec![0.0f64; 3 * h];
    outer_acc(&mut grad[lay.out_w1.clone()], cfg.out_hidden, 3 * h, &dg, &cache.pooled);
    grad[lay.out_b1.clone()].iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
    matvec_t_acc(&params[lay.out_w1.clone()], cfg.out_hidden, 3 * h, &dg, &mut dpooled);

    // Pooling backward into per-LSTM dh sequences.
    let mut dh1_seq = vec![0.0f64; t_len * h];
    let mut dh2_seq = vec![0.0f64; t_len * h];
    let mut dh3_seq = vec![0.0f64; t_len * h];
    for k in 0..h {
        let dmean = dpooled[k] / t_len as f64;
        for t in 0..t_len {
            dh1_seq[t * h + k] += dmean;
        }
        dh2_seq[(t_len - 1) * h + k] += dpooled[h + k];
        dh3_seq[cache.max_arg[k] * h + k] += dpooled[2 * h + k];
    }

    // Upper LSTMs backward; their input gradients accumulate on LSTM0's
    // output sequence.
    let mut ds0 = vec![0.0f64; t_len * h];
    for (l, dh_seq) in [(1usize, &dh1_seq), (2, &dh2_seq), (3, &dh3_seq)] {
        let (wx, wh, b, in_dim) = &lay.lstm[l];
        let mut dinl = vec![0.0f64; t_len * h];
        lstm_backward(
            params,
            grad,
            wx,
            wh,
            b,
            *in_dim,
            h,
            t_len,
            &cache.inputs[l],
            &cache.gates[l],
            &cache.cells[l],
            &cache.hidden[l],
            &masks.lstm_recurrent[l],
            dh_seq,
            &mut dinl,
        );
        for t in 0..t_len {
            for k in 0..h {
                ds0[t * h + k] += dinl[t * h + k] * masks.lstm_input[l][k];
            }
        }
    }

    // LSTM0 backward into the embedding.
    let mut din0 = vec![0.0f64; t_len * e];
    {
        let (wx, wh, b, in_dim) = &lay.lstm[0];
        lstm_backward(
            params,
            grad,
            wx,
            wh,
            b,
            *in_dim,
            h,
            t_len,
            &cache.inputs[0],
            &cache.gates[0],
            &cache.cells[0],
            &cache.hidden[0],
            &masks.lstm_recurrent[0],
            &ds0,
            &mut din0,
        );
    }

    // Input MLP backward per timestep.
    let mut dembed = vec![0.0f64; e];
    let mut dh1 = vec![0.0f64; m];
    for t in 0..t_len {
        for k in 0..e {
            dembed[k] = din0[t * e + k] * masks.lstm_input[0][k];
        }
        let h1t = &cache.h1[t * m..(t + 1) * m];
        outer_acc(&mut grad[lay.mlp_w2.clone()], e, m, &dembed, h1t);
        grad[lay.mlp_b2.clone()].iter_mut().zip(&dembed).for_each(|(a, b)| *a += b);
        dh1.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&params[lay.mlp_w2.clone()], e, m, &dembed, &mut dh1);
        for k in 0..m {
            dh1[k] *= masks.mlp_hidden[k];
            if h1t[k] <= 0.0 {
                dh1[k] = 0.0;
            }
        }
        let xt = &cache.x[t * d..(t + 1) * d];
        outer_acc(&mut grad[lay.mlp_w1.clone()], m, d, &dh1, xt);
        grad[lay.mlp_b1.clone()].iter_mut().zip(&dh1).for_each(|(a, b)| *a += b);
    }
    ce
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Orthonormalizes a square matrix in place (modified Gram-Schmidt on rows).
fn orthogonalize(mat: &mut [f64], n: usize) {
    for r in 0..n {
        for p in 0..r {
            let dot: f64 = (0..n).map(|c| mat[r * n + c] * mat[p * n + c]).sum();
            for c in 0..n {
                mat[r * n + c] -= dot * mat[p * n + c];
            }
        }
        let norm: f64 = (0..n).map(|c| mat[r * n + c] * mat[r * n + c]).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for c in 0..n {
            mat[r * n + c] *= inv;
        }
    }
}

/// Seeded parameter initialization: uniform fan-in scaling for the dense
/// weights, orthogonal recurrent blocks per gate, forget-gate bias 1.
pub fn init_params(cfg: &SeqConfig, seed: u64) -> Vec<f64> {
    let lay = cfg.layout();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = vec![0.0f64; lay.total];

    fn fanin_uniform(
        rng: &mut ChaCha20Rng,
        params: &mut [f64],
        r: std::ops::Range<usize>,
        fan_in: usize,
    ) {
        let limit = (3.0 / fan_in as f64).sqrt();
        for k in r {
            params[k] = rng.gen_range(-limit..limit);
        }
    }
    fanin_uniform(&mut rng, &mut params, lay.mlp_w1.clone(), cfg.input_dim);
    fanin_uniform(&mut rng, &mut params, lay.mlp_w2.clone(), cfg.mlp_hidden);
    let h = cfg.lstm_hidden;
    for (wx, wh, b, in_dim) in &lay.lstm {
        fanin_uniform(&mut rng, &mut params, wx.clone(), *in_dim);
        // Four orthogonal H x H gate blocks.
        for gate in 0..4 {
            let mut block = vec![0.0f64; h * h];
            for v in block.iter_mut() {
                *v = gaussian(&mut rng);
            }
            orthogonalize(&mut block, h);
            let base = wh.start + gate * h * h;
            params[base..base + h * h].copy_from_slice(&block);
        }
        // Forget-gate bias starts at 1.
        for k in 0..h {
            params[b.start + h + k] = 1.0;
        }
    }
    fanin_uniform(&mut rng, &mut params, lay.out_w1.clone(), 3 * h);
    fanin_uniform(&mut rng, &mut params, lay.out_w2.clone(), cfg.out_hidden);
    params
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs without validation improvement before the rate divides by
    /// sqrt(2).
    pub plateau_epochs: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_epochs: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            initial_lr: 0.002,
            plateau_epochs: 3,
            early_stop_epochs: 15,
            max_epochs: 200,
            val_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub cfg: SeqConfig,
    pub params: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub format_version: u32,
}

impl SequenceModel {
    fn standardize(&self, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
        seq.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, v)| (v - self.feature_means[k]) / self.feature_scales[k])
                    .collect()
            })
            .collect()
    }

    /// Class probabilities for one sequence; deterministic (dropout off).
    pub fn predict_proba(&self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(MlError::EmptySequence { index: 0 });
        }
        for row in seq {
            if row.len() != self.cfg.input_dim {
                return Err(MlError::DimensionMismatch {
                    expected: self.cfg.input_dim,
                    got: row.len(),
                });
            }
        }
        let std = self.standardize(seq);
        let masks = Masks::ones(&self.cfg);
        let cache = forward(&self.cfg, &self.params, &std, &masks);
        Ok(softmax(&cache.logits))
    }
}

/// Stratified (1 - frac) : frac split, seeded. Returns (train, validation).
pub fn stratified_split(
    labels: &[usize],
    n_classes: usize,
    frac: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..n_classes {
        let mut idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        // Fisher-Yates.
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n_val = ((idxs.len() as f64) * frac).round() as usize;
        let n_val = if idxs.len() >= 2 {
            n_val.clamp(1, idxs.len() - 1)
        } else {
            0
        };
        val.extend(idxs[..n_val].iter());
        train.extend(idxs[n_val..].iter());
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains the sequence classifier. Returns the best-validation-loss weights
/// and the per-epoch training log.
pub fn seq_train(
    sequences: &[Vec<Vec<f64>>],
    labels: &[usize],
    cfg: &SeqConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(SequenceModel, TrainLog)> {
    if sequences.is_empty() {
        return Err(MlError::EmptyInput("seq_train sequences"));
    }
    if sequences.len() != labels.len() {
        return Err(MlError::DimensionMismatch {
            expected: sequences.len(),
            got: labels.len(),
        });
    }
    for (i, s) in sequences.iter().enumerate() {
        if s.is_empty() {
            return Err(MlError::EmptySequence { index: i });
        }
        for row in s {
            if row.len() != cfg.input_dim {
                return Err(MlError::DimensionMismatch {
                    expected: cfg.input_dim,
                    got: row.len(),
                });
            }
        }
    }

    let (train_idx, val_idx) = stratified_split(labels, cfg.n_classes, tc.val_fraction, seed);
    let val_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx };

    // Standardization statistics over the training rows.
    let d = cfg.input_dim;
    let mut means = vec![0.0f64; d];
    let mut count = 0usize;
    for &i in &train_idx {
        for row in &sequences[i] {
            for k in 0..d {
                means[k] += row[k];
            }
            count += 1;
        }
    }
    for m in means.iter_mut() {
        *m /= count.max(1) as f64;
    }
    let mut vars = vec![0.0f64; d];
    for &i in &train_idx {
        for row in &sequences[i] {
            for k in 0..d {
                let dv = row[k] - means[k];
                vars[k] += dv * dv;
            }
        }
    }
    let scales: Vec<f64> = vars
        .iter()
        .map(|v| {
            let s = (v / count.max(1) as f64).sqrt();
            if s > 1e-9 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |i: usize| -> Vec<Vec<f64>> {
        sequences[i]
            .iter()
            .map(|row| {
                (0..d)
                    .map(|k| (row[k] - means[k]) / scales[k])
                    .collect()
            })
            .collect()
    };
    let train_std: Vec<Vec<Vec<f64>>> = train_idx.iter().map(|&i| standardize(i)).collect();
    let val_std: Vec<Vec<Vec<f64>>> = val_idx.iter().map(|&i| standardize(i)).collect();
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();

    let mut params = init_params(cfg, seed);
    let n_params = params.len();
    let mut adam_m = vec![0.0f64; n_params];
    let mut adam_v = vec![0.0f64; n_params];
    let mut adam_t = 0usize;
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5EED_CAFE);
    let mut lr = tc.initial_lr;
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_improve = 0usize;
    let mut since_plateau = 0usize;
    let mut log = TrainLog::default();

    let val_loss = |params: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (s, &y) in val_std.iter().zip(&val_labels) {
            let cache = forward(cfg, params, s, &Masks::ones(cfg));
            let p = softmax(&cache.logits);
            acc += -(p[y].max(1e-300)).ln();
        }
        acc / val_std.len() as f64
    };

    let mut order: Vec<usize> = (0..train_std.len()).collect();
    let mut grad = vec![0.0f64; n_params];
    for _epoch in 0..tc.max_epochs {
        // Seeded shuffle per epoch.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut train_loss_acc = 0.0;
        for batch in order.chunks(tc.batch_size) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &bi in batch {
                let masks = Masks::sample(cfg, &mut rng);
                let ce = backward_into(
                    cfg,
                    &params,
                    &train_std[bi],
                    train_labels[bi],
                    &masks,
                    &mut grad,
                    scale,
                );
                train_loss_acc += ce;
            }
            // L2 on the weights, once per step.
            if cfg.l2 > 0.0 {
                for r in cfg.weight_ranges() {
                    for k in r {
                        grad[k] += cfg.l2 * params[k];
                    }
                }
            }
            // Adam.
            adam_t += 1;
            let bc1 = 1.0 - beta1.powi(adam_t as i32);
            let bc2 = 1.0 - beta2.powi(adam_t as i32);
            for k in 0..n_params {
                let g = grad[k];
                adam_m[k] = beta1 * adam_m[k] + (1.0 - beta1) * g;
                adam_v[k] = beta2 * adam_v[k] + (1.0 - beta2) * g * g;
                let mhat = adam_m[k] / bc1;
                let vhat = adam_v[k] / bc2;
                params[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        let vl = val_loss(&params);
        log.epochs.push(EpochLog {
            train_loss: train_loss_acc / train_std.len() as f64,
            val_loss: vl,
            lr,
        });
        if vl < best_val - 1e-9 {
            best_val = vl;
            best_params.copy_from_slice(&params);
            since_improve = 0;
            since_plateau = 0;
        } else {
            since_improve += 1;
            since_plateau += 1;
            if since_plateau >= tc.plateau_epochs {
                lr /= 2f64.sqrt();
                since_plateau = 0;
            }
            if since_improve >= tc.early_stop_epochs {
                break;
            }
        }
    }

    Ok((
        SequenceModel {
            cfg: *cfg,
            params: best_params,
            feature_means: means,
            feature_scales: scales,
            format_version: 1,
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_seq(rng: &mut ChaCha20Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = SeqConfig::micro(2);
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let params = init_params(&cfg, 3);
        let seq = micro_seq(&mut rng, 3, 2);
        let label = 2usize;
        let (_, grad) = sequence_loss_grad(&cfg, &params, &seq, label);
        let mut worst: f64 = 0.0;
        for k in 0..params.len() {
            let h = 1e-5 * params[k].abs().max(1.0);
            let mut plus = params.clone();
            plus[k] += h;
            let mut minus = params.clone();
            minus[k] -= h;
            let num =
                (sequence_loss(&cfg, &plus, &seq, label) - sequence_loss(&cfg, &minus, &seq, label))
                    / (2.0 * h);
            let denom = grad[k].abs().max(num.abs()).max(1e-8);
            worst = worst.max((grad[k] - num).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn init_is_bitwise_deterministic() {
        let cfg = SeqConfig::micro(3);
        let a = init_params(&cfg, 9);
        let b = init_params(&cfg, 9);
        assert_eq!(a, b);
        let c = init_params(&cfg, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn orthogonal_recurrent_blocks() {
        let cfg = SeqConfig::micro(2);
        let params = init_params(&cfg, 5);
        let lay = cfg.layout();
        let h = cfg.lstm_hidden;
        let (_, wh, _, _) = &lay.lstm[0];
        for gate in 0..4 {
            let base = wh.start + gate * h * h;
            let block = &params[base..base + h * h];
            for r1 in 0..h {
                for r2 in 0..h {
                    let dot: f64 = (0..h).map(|c| block[r1 * h + c] * block[r2 * h + c]).sum();
                    let expect = if r1 == r2 { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-9, "gate {gate} rows {r1},{r2}: {dot}");
                }
            }
        }
    }

    #[test]
    fn length_one_sequence_and_sum_to_one() {
        let cfg = SeqConfig::micro(2);
        let model = SequenceModel {
            cfg,
            params: init_params(&cfg, 1),
            feature_means: vec![0.0; 2],
            feature_scales: vec![1.0; 2],
            format_version: 1,
        };
        let p = model.predict_proba(&[vec![0.3, -0.4]]).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(model.predict_proba(&[]).is_err());
    }

    #[test]
    fn step_order_matters() {
        let cfg = SeqConfig::micro(2);
        let model = SequenceModel {
            cfg,
            params: init_params(&cfg, 21),
            feature_means: vec![0.0; 2],
            feature_scales: vec![1.0; 2],
            format_version: 1,
        };
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let mut b = a.clone();
        b.reverse();
        let pa = model.predict_proba(&a).unwrap();
        let pb = model.predict_proba(&b).unwrap();
        let diff: f64 = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "permuting steps left the output unchanged");
    }

    #[test]
    fn learns_any_step_above_threshold_task() {
        // label 1 iff any step has feature 0 above 0.5; max pooling suffices.
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        for i in 0..600 {
            let t = rng.gen_range(3..9);
            let positive = i % 2 == 0;
            let mut seq: Vec<Vec<f64>> = (0..t)
                .map(|_| vec![rng.gen_range(-1.0..0.45), rng.gen_range(-1.0..1.0)])
                .collect();
            if positive {
                let at = rng.gen_range(0..t);
                seq[at][0] = rng.gen_range(0.55..1.0);
            }
            sequences.push(seq);
            labels.push(if positive { 1 } else { 0 });
        }
        let mut cfg = SeqConfig::micro(2);
        cfg.mlp_hidden = 16;
        cfg.embed_dim = 8;
        cfg.lstm_hidden = 8;
        cfg.out_hidden = 16;
        let tc = TrainConfig {
            max_epochs: 100,
            ..Default::default()
        };
        let (model, log) = seq_train(&sequences, &labels, &cfg, &tc, 5).unwrap();
        assert!(!log.epochs.is_empty());
        // Validation accuracy on a fresh sample of the same task.
        let mut correct = 0usize;
        let total = 200usize;
        for i in 0..total {
            let t = 3 + i % 6;
            let positive = i % 2 == 1;
            let mut seq: Vec<Vec<f64>> = (0..t)
                .map(|_| vec![rng.gen_range(-1.0..0.45), rng.gen_range(-1.0..1.0)])
                .collect();
            if positive {
                seq[i % t][0] = rng.gen_range(0.55..1.0);
            }
            let p = model.predict_proba(&seq).unwrap();
            let pred = if p[1] > p[0] { 1 } else { 0 };
            if pred == usize::from(positive) {
                correct += 1;
            }
        }
        assert!(
            correct as f64 / total as f64 >= 0.95,
            "accuracy {correct}/{total}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sequences: Vec<Vec<Vec<f64>>> =
            (0..24).map(|_| micro_seq(&mut rng, 4, 2)).collect();
        let labels: Vec<usize> = (0..24).map(|i| i % 4).collect();
        let cfg = SeqConfig::micro(2);
        let tc = TrainConfig {
            max_epochs: 3,
            ..Default::default()
        };
        let (a, _) = seq_train(&sequences, &labels, &cfg, &tc, 11).unwrap();
        let (b, _) = seq_train(&sequences, &labels, &cfg, &tc, 11).unwrap();
        assert_eq!(a.params, b.params);
        assert!(matches!(
            seq_train(&[vec![]], &[0], &cfg, &tc, 0),
            Err(MlError::EmptySequence { .. })
        ));
    }
}
