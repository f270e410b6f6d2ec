//! Asynchronous temporal attention.
//!
//! A SimTA layer lets every position attend to every position that is not
//! later in time. The score depends only on elapsed time:
//!
//! ```text
//! score_ij = -softplus(lambda_raw) * (t_i - t_j) / tau + bias
//! ```
//!
//! so a layer is a learned recency kernel over value projections, followed
//! by a position-wise feedforward. A TSimTA block wraps a stack of SimTA
//! layers in a post-norm transformer encoder block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{select_row, stack_rows, FeedForward, LayerNormParams, Linear};
use crate::rng::SeededRng;

pub const DEFAULT_TAU_DAYS: f64 = 30.0;

/// Which encoder a model uses for every modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderFamily {
    /// A plain stack of SimTA layers.
    SimTA,
    /// SimTA stacks embedded in transformer encoder blocks.
    TSimTA,
}

impl fmt::Display for EncoderFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderFamily::SimTA => "SimTA",
            EncoderFamily::TSimTA => "TSimTA",
        })
    }
}

impl FromStr for EncoderFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simta" => Ok(EncoderFamily::SimTA),
            "tsimta" => Ok(EncoderFamily::TSimTA),
            _ => Err(Error::Config(format!(
                "unknown model family '{s}' (expected SimTA or TSimTA)"
            ))),
        }
    }
}

/// Timestamped feature rows of one modality, all at or before `cutoff`.
#[derive(Clone, Debug, PartialEq)]
pub struct AsyncSequence {
    times: Vec<f64>,
    features: Vec<f64>,
    width: usize,
    cutoff: f64,
}

impl AsyncSequence {
    /// `features` is row-major, one row of `width` values per timestamp.
    /// Timestamps must be ascending (ties allowed) and not after `cutoff`.
    pub fn new(times: Vec<f64>, features: Vec<f64>, width: usize, cutoff: f64) -> Result<Self> {
        if features.len() != times.len() * width {
            return Err(Error::shape(
                "async_sequence",
                &[times.len(), width],
                &[features.len()],
            ));
        }
        if !cutoff.is_finite() || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFiniteInput {
                op: "async_sequence",
            });
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("async_sequence", "timestamps not ascending"));
        }
        if let Some(&last) = times.last() {
            if last > cutoff {
                return Err(Error::NonCausal(cutoff - last));
            }
        }
        Ok(Self {
            times,
            features,
            width,
            cutoff,
        })
    }

    pub fn empty(width: usize, cutoff: f64) -> Self {
        Self {
            times: Vec::new(),
            features: Vec::new(),
            width,
            cutoff,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Same events with every timestamp (and the cutoff) moved by `c` days.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            times: self.times.iter().map(|t| t + c).collect(),
            features: self.features.clone(),
            width: self.width,
            cutoff: self.cutoff + c,
        }
    }
}

/// Attention weights of one target over its candidates, given the elapsed
/// times `deltas` (days, all ≥ 0).
pub fn simta_scores(deltas: &[f64], lambda_raw: f64, bias: f64, tau_days: f64) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if let Some(&d) = deltas.iter().find(|d| d.is_nan() || **d < 0.0) {
        return Err(Error::NonCausal(d));
    }
    let decay = autodiff::softplus(lambda_raw);
    let scores: Vec<f64> = deltas.iter().map(|d| -(d / tau_days) * decay + bias).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTALayerParams {
    pub lambda_raw: ParamId,
    pub bias: ParamId,
    pub value: Linear,
    pub ffn: FeedForward,
    pub tau_days: f64,
    pub d_model: usize,
}

impl SimTALayerParams {
    /// `lambda_raw = 0` (decay ln 2 per `tau_days`), zero bias, Glorot
    /// projections, FFN hidden width `4·d_model`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        tau_days: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let lambda_raw = store.add(format!("{name}.lambda_raw"), Tensor::zeros(vec![1]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1]));
        let value = Linear::new(store, &format!("{name}.value"), d_model, d_model, rng);
        let ffn = FeedForward::new(
            store,
            &format!("{name}.ffn"),
            d_model,
            4 * d_model,
            d_model,
            rng,
        );
        Self {
            lambda_raw,
            bias,
            value,
            ffn,
            tau_days,
            d_model,
        }
    }

    /// Effective decay per `tau_days`.
    pub fn decay(&self, store: &ParamStore) -> f64 {
        autodiff::softplus(store.get(self.lambda_raw).data()[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TSimTABlockParams {
    pub simta_layers: Vec<SimTALayerParams>,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
}

impl TSimTABlockParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        n_inner: usize,
        tau_days: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let simta_layers = (0..n_inner)
            .map(|l| SimTALayerParams::new(store, &format!("{name}.simta{l}"), d_model, tau_days, rng))
            .collect();
        Self {
            simta_layers,
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d_model),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                d_model,
                4 * d_model,
                d_model,
                rng,
            ),
        }
    }
}

/// Encoder of one modality: exactly one family per model.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderParams {
    SimTA(Vec<SimTALayerParams>),
    TSimTA(Vec<TSimTABlockParams>),
}

impl EncoderParams {
    /// `n_blocks` TSimTA blocks of `n_inner` layers, or for the plain
    /// family a stack of `n_blocks·n_inner` layers.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        family: EncoderFamily,
        n_blocks: usize,
        n_inner: usize,
        d_model: usize,
        tau_days: f64,
        rng: &mut SeededRng,
    ) -> Self {
        match family {
            EncoderFamily::SimTA => EncoderParams::SimTA(
                (0..n_blocks * n_inner)
                    .map(|l| {
                        SimTALayerParams::new(store, &format!("{name}.simta{l}"), d_model, tau_days, rng)
                    })
                    .collect(),
            ),
            EncoderFamily::TSimTA => EncoderParams::TSimTA(
                (0..n_blocks)
                    .map(|b| {
                        TSimTABlockParams::new(
                            store,
                            &format!("{name}.block{b}"),
                            d_model,
                            n_inner,
                            tau_days,
                            rng,
                        )
                    })
                    .collect(),
            ),
        }
    }

    pub fn family(&self) -> EncoderFamily {
        match self {
            EncoderParams::SimTA(_) => EncoderFamily::SimTA,
            EncoderParams::TSimTA(_) => EncoderFamily::TSimTA,
        }
    }

    /// Every SimTA layer in evaluation order.
    pub fn layers(&self) -> Vec<&SimTALayerParams> {
        match self {
            EncoderParams::SimTA(ls) => ls.iter().collect(),
            EncoderParams::TSimTA(bs) => bs.iter().flat_map(|b| b.simta_layers.iter()).collect(),
        }
    }
}

/// Attention weights recorded for one SimTA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub target_times: Vec<f64>,
    pub source_times: Vec<f64>,
    /// `target_times.len() × source_times.len()`, row-major; non-causal
    /// entries are exactly zero.
    pub weights: Vec<f64>,
}

/// One `(layer, target_t, source_t, weight)` record of an attention dump.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer: usize,
    pub target_t: f64,
    pub source_t: f64,
    pub weight: f64,
}

impl LayerTrace {
    /// Causal entries only.
    pub fn rows(&self) -> Vec<AttentionRow> {
        let n = self.source_times.len();
        let mut out = Vec::new();
        for (i, &ti) in self.target_times.iter().enumerate() {
            for (j, &tj) in self.source_times.iter().enumerate() {
                if tj <= ti {
                    out.push(AttentionRow {
                        layer: self.layer,
                        target_t: ti,
                        source_t: tj,
                        weight: self.weights[i * n + j],
                    });
                }
            }
        }
        out
    }
}

fn check_width(tape: &Tape<'_>, x: Var, len: usize, d: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if s != [len, d] {
        return Err(Error::shape(op, s, &[len, d]));
    }
    Ok(())
}

/// One SimTA layer. With `last_only` the output holds only the row of the
/// final position, which is all a sequence summary needs.
fn simta_layer<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &SimTALayerParams,
    x: Var,
    times: &[f64],
    last_only: bool,
    layer_idx: usize,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    if times.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    check_width(tape, x, times.len(), p.d_model, "simta_layer")?;
    let targets: &[f64] = if last_only {
        &times[times.len() - 1..]
    } else {
        times
    };
    let n = times.len();
    let mut neg_dt = vec![0.0; targets.len() * n];
    let mut valid = vec![false; targets.len() * n];
    for (i, &ti) in targets.iter().enumerate() {
        for (j, &tj) in times.iter().enumerate() {
            let dt = ti - tj;
            if dt >= 0.0 {
                neg_dt[i * n + j] = -(dt / p.tau_days);
                valid[i * n + j] = true;
            }
        }
    }
    let d = tape.constant(vec![targets.len(), n], neg_dt)?;
    let lambda = tape.param(store, p.lambda_raw);
    let decay = tape.softplus(lambda)?;
    let bias = tape.param(store, p.bias);
    let scores = tape.mul(d, decay)?;
    let scores = tape.add(scores, bias)?;
    let w = tape.softmax_masked(scores, Some(valid))?;
    if let Some(tr) = trace {
        tr.push(LayerTrace {
            layer: layer_idx,
            target_times: targets.to_vec(),
            source_times: times.to_vec(),
            weights: tape.value(w).to_vec(),
        });
    }
    let v = p.value.forward(tape, store, x)?;
    let mixed = tape.matmul(w, v)?;
    p.ffn.forward(tape, store, mixed)
}

/// `out_i = FFN(Σ_{t_j ≤ t_i} w_ij (x_j W_v + b_v))` for every position.
pub fn simta_layer_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    params: &SimTALayerParams,
    x: Var,
    times: &[f64],
) -> Result<Var> {
    simta_layer(tape, store, params, x, times, false, 0, None)
}

fn stack<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    layers: &[SimTALayerParams],
    mut x: Var,
    times: &[f64],
    last_only: bool,
    first_layer: usize,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("simta_stack", "no layers"));
    }
    for (l, p) in layers.iter().enumerate() {
        let last = last_only && l + 1 == layers.len();
        x = simta_layer(tape, store, p, x, times, last, first_layer + l, trace.as_deref_mut())?;
    }
    Ok(x)
}

/// Sequential composition of SimTA layers over fixed timestamps.
pub fn simta_stack_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    layers: &[SimTALayerParams],
    x: Var,
    times: &[f64],
) -> Result<Var> {
    stack(tape, store, layers, x, times, false, 0, None)
}

fn block<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &TSimTABlockParams,
    x: Var,
    times: &[f64],
    last_only: bool,
    first_layer: usize,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    let s = stack(tape, store, &p.simta_layers, x, times, last_only, first_layer, trace)?;
    let skip = if last_only {
        select_row(tape, x, times.len() - 1)?
    } else {
        x
    };
    let y = tape.add(skip, s)?;
    let y = p.ln1.forward(tape, store, y)?;
    let f = p.ffn.forward(tape, store, y)?;
    let out = tape.add(y, f)?;
    p.ln2.forward(tape, store, out)
}

/// `y = ln1(x + SimTAStack(x))`, `out = ln2(y + FFN(y))`.
pub fn tsimta_block_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    params: &TSimTABlockParams,
    x: Var,
    times: &[f64],
) -> Result<Var> {
    block(tape, store, params, x, times, false, 0, None)
}

/// Runs a whole encoder. With `last_only` the result is the final
/// position's row, shape `[1, d_model]`.
pub fn encoder_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    encoder: &EncoderParams,
    mut x: Var,
    times: &[f64],
    last_only: bool,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    match encoder {
        EncoderParams::SimTA(layers) => stack(tape, store, layers, x, times, last_only, 0, trace),
        EncoderParams::TSimTA(blocks) => {
            if blocks.is_empty() {
                return Err(Error::invalid("tsimta_encoder", "no blocks"));
            }
            let mut first = 0;
            for (b, p) in blocks.iter().enumerate() {
                let last = last_only && b + 1 == blocks.len();
                x = block(tape, store, p, x, times, last, first, trace.as_deref_mut())?;
                first += p.simta_layers.len();
            }
            Ok(x)
        }
    }
}

/// Fixed-width representation of a modality at a cutoff.
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    /// Shape `[1, d_model]`.
    pub rep: Var,
    pub present: bool,
}

/// Appends a virtual query event (`query`, at `cutoff`) to the embedded
/// events `x` and returns the encoder output at the query. An empty
/// sequence yields `missing` with `present = false`.
#[allow(clippy::too_many_arguments)]
pub fn summarize_sequence<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    encoder: &EncoderParams,
    x: Option<Var>,
    times: &[f64],
    cutoff: f64,
    query: ParamId,
    missing: ParamId,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Summary> {
    let x = match x {
        Some(x) if !times.is_empty() => x,
        _ => {
            return Ok(Summary {
                rep: tape.param(store, missing),
                present: false,
            })
        }
    };
    if let Some(&last) = times.last() {
        if last > cutoff {
            return Err(Error::NonCausal(cutoff - last));
        }
    }
    let q = tape.param(store, query);
    let seq = stack_rows(tape, &[x, q])?;
    let mut all_times = Vec::with_capacity(times.len() + 1);
    all_times.extend_from_slice(times);
    all_times.push(cutoff);
    let rep = if trace.is_some() {
        let out = encoder_forward(tape, store, encoder, seq, &all_times, false, trace)?;
        select_row(tape, out, times.len())?
    } else {
        encoder_forward(tape, store, encoder, seq, &all_times, true, None)?
    };
    Ok(Summary { rep, present: true })
}
