//! Forward and backward passes of the recurrent encoder-decoder.
//!
//! Encoder: `h_i = tanh(Wx·E[x_i] + Wh·h_{i-1} + b)` over the prompt read
//! back to front, so the leading `role:`/`trigger:` fields sit closest to the
//! final state. Decoder starts from that state and runs the same cell with
//! its own weights. Logits are `E·(Wo·s) + bo` with `<bos>`/`<pad>` masked.

use super::params::{PolicyParams, Weights};
use super::vocab::{BOS, PAD};

pub(crate) fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ·g`
fn matvec_t(w: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, gi) in g.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// `w += g ⊗ x`
fn outer_add(w: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (i, gi) in g.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        let row = &mut w[i * n..(i + 1) * n];
        for (r, xj) in row.iter_mut().zip(x) {
            *r += gi * xj;
        }
    }
}

fn emb_row(w: &Weights, hidden: usize, id: usize) -> &[f64] {
    &w.emb[id * hidden..(id + 1) * hidden]
}

fn cell(wx: &[f64], wh: &[f64], b: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut pre = b.to_vec();
    matvec(wx, x, &mut pre);
    matvec(wh, h, &mut pre);
    pre.iter_mut().for_each(|v| *v = v.tanh());
    pre
}

/// Final encoder state plus the per-step trace needed for backprop.
pub(crate) struct Encoded {
    inputs: Vec<usize>,
    states: Vec<Vec<f64>>,
}

impl Encoded {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("initial state is always present")
    }
}

pub(crate) fn encode(p: &PolicyParams, prompt: &[usize]) -> Encoded {
    let h = p.hidden;
    let w = &p.weights;
    let inputs: Vec<usize> = prompt.iter().rev().copied().collect();
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(vec![0.0; h]);
    for &x in &inputs {
        let next = cell(
            &w.enc_wx,
            &w.enc_wh,
            &w.enc_b,
            emb_row(w, h, x),
            states.last().unwrap(),
        );
        states.push(next);
    }
    Encoded { inputs, states }
}

pub(crate) fn decoder_step(p: &PolicyParams, state: &[f64], input: usize) -> Vec<f64> {
    let w = &p.weights;
    cell(
        &w.dec_wx,
        &w.dec_wh,
        &w.dec_b,
        emb_row(w, p.hidden, input),
        state,
    )
}

/// Returns the pre-projection vector `u = Wo·s` and the raw logits.
pub(crate) fn output(p: &PolicyParams, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = p.hidden;
    let w = &p.weights;
    let mut u = vec![0.0; h];
    matvec(&w.out_w, state, &mut u);
    let mut logits = w.out_b.clone();
    matvec(&w.emb, &u, &mut logits);
    (u, logits)
}

/// Log-softmax over the emittable tokens at `temperature`; masked entries are −∞.
pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if i == BOS || i == PAD {
                f64::NEG_INFINITY
            } else {
                l / temperature
            }
        })
        .collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = scaled.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    scaled.iter().map(|&l| l - z).collect()
}

pub(crate) fn next_log_probs(p: &PolicyParams, state: &[f64], temperature: f64) -> Vec<f64> {
    log_softmax(&output(p, state).1, temperature)
}

/// A teacher-forced pass over `inputs` (starting with `<bos>`).
pub(crate) struct Trace {
    enc: Encoded,
    inputs: Vec<usize>,
    /// `states[0]` is the encoder output; `states[t]` follows `inputs[t-1]`.
    states: Vec<Vec<f64>>,
    outs: Vec<Vec<f64>>,
    /// Log-probabilities after each input, only when requested.
    pub log_probs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

pub(crate) fn forward(
    p: &PolicyParams,
    prompt: &[usize],
    inputs: &[usize],
    with_outputs: bool,
) -> Trace {
    let enc = encode(p, prompt);
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(enc.last().to_vec());
    let mut outs = Vec::new();
    let mut log_probs = Vec::new();
    for &y in inputs {
        let s = decoder_step(p, states.last().unwrap(), y);
        if with_outputs {
            let (u, logits) = output(p, &s);
            outs.push(u);
            log_probs.push(log_softmax(&logits, 1.0));
        }
        states.push(s);
    }
    Trace {
        enc,
        inputs: inputs.to_vec(),
        states,
        outs,
        log_probs,
    }
}

/// Accumulates into `grads` the gradient of a scalar whose partials are
/// `dlogits[t]` with respect to the logits after input `t` and `ds_final`
/// with respect to the last decoder state.
pub(crate) fn backward(
    p: &PolicyParams,
    trace: &Trace,
    dlogits: Option<&[Vec<f64>]>,
    ds_final: Option<&[f64]>,
    grads: &mut Weights,
) {
    let h = p.hidden;
    let w = &p.weights;
    let steps = trace.inputs.len();
    let mut carry = vec![0.0; h];
    if let Some(g) = ds_final {
        carry.copy_from_slice(g);
    }
    for t in (1..=steps).rev() {
        let s = &trace.states[t];
        let mut ds = std::mem::replace(&mut carry, vec![0.0; h]);
        if let Some(dl) = dlogits {
            let dl = &dl[t - 1];
            let u = &trace.outs[t - 1];
            let mut du = vec![0.0; h];
            for (v, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads.out_b[v] += g;
                let e = &w.emb[v * h..(v + 1) * h];
                let ge = &mut grads.emb[v * h..(v + 1) * h];
                for k in 0..h {
                    ge[k] += g * u[k];
                    du[k] += g * e[k];
                }
            }
            outer_add(&mut grads.out_w, &du, s);
            matvec_t(&w.out_w, &du, &mut ds);
        }
        let dpre: Vec<f64> = ds
            .iter()
            .zip(s)
            .map(|(d, sv)| d * (1.0 - sv * sv))
            .collect();
        let y = trace.inputs[t - 1];
        outer_add(&mut grads.dec_wx, &dpre, emb_row(w, h, y));
        matvec_t(&w.dec_wx, &dpre, &mut grads.emb[y * h..(y + 1) * h]);
        outer_add(&mut grads.dec_wh, &dpre, &trace.states[t - 1]);
        grads.dec_b.iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
        matvec_t(&w.dec_wh, &dpre, &mut carry);
    }
    // carry is now ∂/∂h_n
    let enc = &trace.enc;
    for i in (1..enc.states.len()).rev() {
        let hs = &enc.states[i];
        let dpre: Vec<f64> = carry
            .iter()
            .zip(hs)
            .map(|(d, hv)| d * (1.0 - hv * hv))
            .collect();
        let x = enc.inputs[i - 1];
        outer_add(&mut grads.enc_wx, &dpre, emb_row(w, h, x));
        matvec_t(&w.enc_wx, &dpre, &mut grads.emb[x * h..(x + 1) * h]);
        outer_add(&mut grads.enc_wh, &dpre, &enc.states[i - 1]);
        grads.enc_b.iter_mut().zip(&dpre).for_each(|(b, d)| *b += d);
        carry = vec![0.0; h];
        matvec_t(&w.enc_wh, &dpre, &mut carry);
    }
}

/// Teacher-forced per-token log-probabilities of `outputs` (which should end
/// in `<eos>` when the sequence is complete).
pub(crate) fn token_log_probs(p: &PolicyParams, prompt: &[usize], outputs: &[usize]) -> Vec<f64> {
    let enc = encode(p, prompt);
    let mut state = enc.last().to_vec();
    let mut prev = BOS;
    let mut out = Vec::with_capacity(outputs.len());
    for &y in outputs {
        state = decoder_step(p, &state, prev);
        out.push(next_log_probs(p, &state, 1.0)[y]);
        prev = y;
    }
    out
}

/// Adds `∂(Σ_t coef[t]·log p_t[outputs[t]])/∂θ` into `grads` and returns the
/// per-token log-probabilities.
pub(crate) fn weighted_log_prob_grad(
    p: &PolicyParams,
    prompt: &[usize],
    outputs: &[usize],
    coef: &[f64],
    grads: &mut Weights,
) -> Vec<f64> {
    let inputs = teacher_inputs(outputs);
    let trace = forward(p, prompt, &inputs, true);
    let mut lps = Vec::with_capacity(outputs.len());
    let dlogits: Vec<Vec<f64>> = trace
        .log_probs
        .iter()
        .zip(outputs)
        .zip(coef)
        .map(|((lp, &y), &c)| {
            lps.push(lp[y]);
            let mut d: Vec<f64> = lp.iter().map(|l| -c * l.exp()).collect();
            d[y] += c;
            d
        })
        .collect();
    backward(p, &trace, Some(&dlogits), None, grads);
    lps
}

/// `[<bos>, y_1, …, y_{T-1}]`
pub(crate) fn teacher_inputs(outputs: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(outputs.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&outputs[..outputs.len().saturating_sub(1)]);
    inputs.truncate(outputs.len());
    inputs
}
