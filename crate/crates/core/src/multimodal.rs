//! The multimodal model family: per-modality encoders, multimodal dropout,
//! the fusion variants and the multitask sigmoid heads.
//!
//! Modalities are always laid out in the order blood, imaging,
//! medication. An absent (or dropped) modality contributes its learned
//! missing representation instead of an encoder summary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{summarize_sequence, EncoderFamily, EncoderParams, LayerTrace, DEFAULT_TAU_DAYS};
use crate::autodiff::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
use crate::cohort::{Modality, ModalityEvents, PreparedRecord};
use crate::error::{Error, Result};
use crate::nn::{flatten_rows, glorot, stack_rows, FeedForward, LayerNormParams, Linear};
use crate::rng::SeededRng;

pub const DEFAULT_TASKS: usize = 4;
pub const MODEL_FORMAT_VERSION: &str = "tsimta-model/1";

/// Which modalities feed the model and how they are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    Unimodal(Modality),
    Concat,
    ConcatSA,
    LateMean,
}

impl Variant {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            Variant::Unimodal(m) => vec![m],
            _ => Modality::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Unimodal(m) => write!(f, "Unimodal:{m}"),
            Variant::Concat => f.write_str("Concat"),
            Variant::ConcatSA => f.write_str("ConcatSA"),
            Variant::LateMean => f.write_str("LateMean"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if let Some(m) = lower.strip_prefix("unimodal:") {
            return Ok(Variant::Unimodal(m.parse()?));
        }
        match lower.as_str() {
            "concat" => Ok(Variant::Concat),
            "concatsa" | "concat+sa" | "concat-sa" => Ok(Variant::ConcatSA),
            "latemean" | "late-mean" => Ok(Variant::LateMean),
            _ => Err(Error::Config(format!(
                "unknown fusion variant '{s}' (expected Unimodal:<modality>, Concat, ConcatSA or LateMean)"
            ))),
        }
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: Variant,
    pub sa_heads: usize,
    pub use_positional_encoding: bool,
    pub mlp_hidden: usize,
    pub p_modality_drop: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ConcatSA,
            sa_heads: 2,
            use_positional_encoding: false,
            mlp_hidden: 64,
            p_modality_drop: 0.25,
        }
    }
}

/// Input widths fixed by the fitted preprocessor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputWidths {
    pub blood: usize,
    pub imaging: usize,
    /// Medication vocabulary size including the unknown token.
    pub medication: usize,
}

impl InputWidths {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Blood => self.blood,
            Modality::Imaging => self.imaging,
            Modality::Medication => self.medication,
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: EncoderFamily,
    /// Number of TSimTA blocks (N).
    pub n_blocks: usize,
    /// SimTA layers per block (N_inner).
    pub n_inner: usize,
    pub d_model: usize,
    pub tau_days: f64,
    pub fusion: FusionConfig,
    pub n_tasks: usize,
    pub seed: u64,
    pub modality_order: Vec<Modality>,
    pub input_widths: InputWidths,
}

impl ModelConfig {
    pub fn new(family: EncoderFamily, fusion: FusionConfig, input_widths: InputWidths, seed: u64) -> Self {
        Self {
            family,
            n_blocks: 1,
            n_inner: 3,
            d_model: 32,
            tau_days: DEFAULT_TAU_DAYS,
            fusion,
            n_tasks: DEFAULT_TASKS,
            seed,
            modality_order: Modality::ALL.to_vec(),
            input_widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.modality_order != Modality::ALL {
            return bad(format!("modality order must be blood, imaging, medication; got {:?}", self.modality_order));
        }
        if self.n_blocks == 0 || self.n_inner == 0 {
            return bad("N and N_inner must be positive".into());
        }
        if self.d_model == 0 || self.n_tasks == 0 || self.fusion.mlp_hidden == 0 {
            return bad("d_model, n_tasks and mlp_hidden must be positive".into());
        }
        if !(self.tau_days > 0.0 && self.tau_days.is_finite()) {
            return bad(format!("tau_days must be positive, got {}", self.tau_days));
        }
        let p = self.fusion.p_modality_drop;
        if !(0.0..1.0).contains(&p) {
            return bad(format!("p_modality_drop must lie in [0, 1), got {p}"));
        }
        if self.fusion.variant == Variant::ConcatSA {
            let h = self.fusion.sa_heads;
            if h == 0 || self.d_model % h != 0 {
                return bad(format!("sa_heads ({h}) must divide d_model ({})", self.d_model));
            }
        }
        if self.input_widths.medication == 0 && self.fusion.variant.modalities().contains(&Modality::Medication) {
            return bad("medication vocabulary must contain at least the unknown token".into());
        }
        Ok(())
    }
}

/// Input embedding, encoder and the learned query and missing vectors of
/// one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBranch {
    pub modality: Modality,
    /// Medication only: token table `[vocab, d_model]`.
    pub embedding: Option<ParamId>,
    pub input: Linear,
    pub encoder: EncoderParams,
    pub query: ParamId,
    pub missing: ParamId,
}

impl ModalityBranch {
    fn new(store: &mut ParamStore, name: &str, modality: Modality, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.d_model;
        let width = cfg.input_widths.get(modality);
        let (embedding, fan_in) = if modality == Modality::Medication {
            let table = Tensor::param(vec![width, d], glorot(rng, width, d)).expect("table shape");
            (Some(store.add(format!("{name}.embedding"), table)), d)
        } else {
            (None, width)
        };
        let input = Linear::new(store, &format!("{name}.input"), fan_in, d, rng);
        let encoder = EncoderParams::new(
            store,
            &format!("{name}.encoder"),
            cfg.family,
            cfg.n_blocks,
            cfg.n_inner,
            d,
            cfg.tau_days,
            rng,
        );
        let query = store.add(
            format!("{name}.query"),
            Tensor::param(vec![1, d], glorot(rng, 1, d)).expect("query shape"),
        );
        let missing = store.add(format!("{name}.missing"), Tensor::zeros(vec![1, d]));
        Self {
            modality,
            embedding,
            input,
            encoder,
            query,
            missing,
        }
    }
}

/// One post-norm transformer encoder block over modality tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    /// Learned per-token offsets `[tokens, d_model]`.
    pub positional: Option<ParamId>,
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub out: Linear,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tokens: usize,
        d_model: usize,
        heads: usize,
        positional: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let dk = d_model / heads;
        let positional = positional.then(|| {
            store.add(
                format!("{name}.positional"),
                Tensor::param(vec![tokens, d_model], glorot(rng, tokens, d_model)).expect("positional shape"),
            )
        });
        let mut proj = |kind: &str| -> Vec<Linear> {
            (0..heads)
                .map(|h| Linear::new(store, &format!("{name}.head{h}.{kind}"), d_model, dk, rng))
                .collect()
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        Self {
            positional,
            q,
            k,
            v,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d_model),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, 4 * d_model, d_model, rng),
        }
    }
}

/// Fusion (optional self-attention, then the MLP) and the task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub slots: usize,
    pub sa: Option<SelfAttentionBlock>,
    pub mlp: FeedForward,
    /// Zero-initialised, so every task starts at probability 0.5.
    pub heads: Linear,
}

impl FusionHead {
    fn new(store: &mut ParamStore, name: &str, slots: usize, with_sa: bool, cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let f = &cfg.fusion;
        let sa = with_sa.then(|| {
            SelfAttentionBlock::new(store, &format!("{name}.sa"), slots, cfg.d_model, f.sa_heads, f.use_positional_encoding, rng)
        });
        Self {
            slots,
            sa,
            mlp: FeedForward::new(store, &format!("{name}.mlp"), slots * cfg.d_model, f.mlp_hidden, f.mlp_hidden, rng),
            heads: Linear::zeros(store, &format!("{name}.heads"), f.mlp_hidden, cfg.n_tasks),
        }
    }

    /// Task probabilities `[1, T]` from one representation per slot.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, reps: &[Var]) -> Result<Var> {
        let fused = match &self.sa {
            Some(sa) => fuse_concat_sa(tape, store, self, sa, reps)?.0,
            None => fuse_concat(tape, store, self, reps)?,
        };
        multitask_heads(tape, store, &self.heads, fused)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    /// One head over the fused representation of its branches.
    Fused { branches: Vec<ModalityBranch>, fusion: FusionHead },
    /// Independent unimodal members whose probabilities are averaged.
    Late { members: Vec<(ModalityBranch, FusionHead)> },
}

/// A representation of one modality ready for fusion.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub modality: Modality,
    /// Shape `[1, d_model]`.
    pub rep: Var,
    pub present: bool,
}

/// Per-layer attention weights of each encoded modality.
pub type Traces = BTreeMap<Modality, Vec<LayerTrace>>;

/// Mean of the token embeddings of each medication event, `[events, d]`.
pub fn embed_medication<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    table: ParamId,
    tokens: &[Vec<usize>],
) -> Result<Var> {
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let mut pool = vec![0.0; tokens.len() * ids.len()];
    let mut col = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.is_empty() {
            return Err(Error::invalid("embed_medication", "medication event without tokens"));
        }
        for _ in t {
            pool[i * ids.len() + col] = 1.0 / t.len() as f64;
            col += 1;
        }
    }
    let n_ids = ids.len();
    let table = tape.param(store, table);
    let emb = tape.embedding(table, ids)?;
    let pool = tape.constant(vec![tokens.len(), n_ids], pool)?;
    tape.matmul(pool, emb)
}

fn encode_branch<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    branch: &ModalityBranch,
    events: &ModalityEvents,
    cutoff: f64,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Encoded> {
    let n = events.visible(cutoff);
    let x = if n == 0 {
        None
    } else if let Some(table) = branch.embedding {
        let pooled = embed_medication(tape, store, table, &events.tokens[..n])?;
        Some(branch.input.forward(tape, store, pooled)?)
    } else {
        let raw = tape.constant(vec![n, events.width], events.rows[..n * events.width].to_vec())?;
        Some(branch.input.forward(tape, store, raw)?)
    };
    let s = summarize_sequence(
        tape,
        store,
        &branch.encoder,
        x,
        &events.times[..n],
        cutoff,
        branch.query,
        branch.missing,
        trace,
    )?;
    Ok(Encoded {
        modality: branch.modality,
        rep: s.rep,
        present: s.present,
    })
}

/// Summarises every branch's modality at `cutoff`, in branch order.
pub fn encode_modalities<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    branches: &[ModalityBranch],
    record: &PreparedRecord,
    cutoff: f64,
    mut traces: Option<&mut Traces>,
) -> Result<Vec<Encoded>> {
    branches
        .iter()
        .map(|b| {
            let trace = traces.as_deref_mut().map(|t| t.entry(b.modality).or_default());
            encode_branch(tape, store, b, record.events(b.modality), cutoff, trace)
        })
        .collect()
}

/// Presence flags after multimodal dropout. Each present modality is
/// dropped with probability `p`; if every present one would go, a
/// uniformly chosen present modality is kept.
pub fn dropout_mask(present: &[bool], rng: &mut SeededRng, p: f64, training: bool) -> Vec<bool> {
    if !training || p <= 0.0 {
        return present.to_vec();
    }
    let mut kept: Vec<bool> = present.iter().map(|&on| on && !rng.bernoulli(p)).collect();
    let candidates: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if !candidates.is_empty() && !kept.iter().any(|&k| k) {
        kept[candidates[rng.index(candidates.len())]] = true;
    }
    kept
}

/// Replaces dropped modalities by their missing representation.
pub fn modality_dropout<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    branches: &[ModalityBranch],
    reps: Vec<Encoded>,
    rng: &mut SeededRng,
    p: f64,
    training: bool,
) -> Vec<Encoded> {
    let present: Vec<bool> = reps.iter().map(|r| r.present).collect();
    let kept = dropout_mask(&present, rng, p, training);
    reps.into_iter()
        .zip(branches)
        .zip(kept)
        .map(|((r, b), keep)| {
            if r.present && !keep {
                Encoded {
                    modality: r.modality,
                    rep: tape.param(store, b.missing),
                    present: false,
                }
            } else {
                r
            }
        })
        .collect()
}

fn check_slots(head: &FusionHead, reps: &[Var]) -> Result<()> {
    if reps.len() != head.slots {
        return Err(Error::invalid(
            "fuse",
            format!("expected {} modality slots, got {}", head.slots, reps.len()),
        ));
    }
    Ok(())
}

/// Concatenation in slot order followed by the MLP.
pub fn fuse_concat<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, head: &FusionHead, reps: &[Var]) -> Result<Var> {
    check_slots(head, reps)?;
    let x = tape.concat(reps)?;
    head.mlp.forward(tape, store, x)
}

/// Multi-head self-attention block over `tokens` (`[M, d_model]`).
/// Returns the block output and each head's `[M, M]` attention matrix.
pub fn self_attention_block<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    sa: &SelfAttentionBlock,
    tokens: Var,
) -> Result<(Var, Vec<Var>)> {
    let x = match sa.positional {
        Some(pos) => {
            let pos = tape.param(store, pos);
            tape.add(tokens, pos)?
        }
        None => tokens,
    };
    let mut outs = Vec::with_capacity(sa.q.len());
    let mut weights = Vec::with_capacity(sa.q.len());
    for ((q, k), v) in sa.q.iter().zip(&sa.k).zip(&sa.v) {
        let qh = q.forward(tape, store, x)?;
        let kh = k.forward(tape, store, x)?;
        let vh = v.forward(tape, store, x)?;
        let scores = tape.matmul_t(qh, false, kh, true)?;
        let scores = tape.affine(scores, 1.0 / (q.fan_out as f64).sqrt(), 0.0)?;
        let w = tape.softmax_masked(scores, None)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let heads = tape.concat(&outs)?;
    let attn = sa.out.forward(tape, store, heads)?;
    let y = tape.add(x, attn)?;
    let y = sa.ln1.forward(tape, store, y)?;
    let f = sa.ffn.forward(tape, store, y)?;
    let z = tape.add(y, f)?;
    Ok((sa.ln2.forward(tape, store, z)?, weights))
}

/// Modality tokens through the self-attention block, then concatenated
/// and passed through the MLP.
pub fn fuse_concat_sa<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    head: &FusionHead,
    sa: &SelfAttentionBlock,
    reps: &[Var],
) -> Result<(Var, Vec<Var>)> {
    check_slots(head, reps)?;
    let tokens = stack_rows(tape, reps)?;
    let (y, weights) = self_attention_block(tape, store, sa, tokens)?;
    let flat = flatten_rows(tape, y)?;
    Ok((head.mlp.forward(tape, store, flat)?, weights))
}

/// `sigmoid(fused·W + b)`, one probability per task.
pub fn multitask_heads<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, heads: &Linear, fused: Var) -> Result<Var> {
    let logits = heads.forward(tape, store, fused)?;
    tape.sigmoid(logits)
}

/// Per-task mean of the probabilities of present modalities.
pub fn late_fusion_mean(probs: &[Vec<f64>], present: &[bool]) -> Result<Vec<f64>> {
    if probs.len() != present.len() {
        return Err(Error::invalid("late_fusion_mean", "one presence flag per modality required"));
    }
    let chosen: Vec<&Vec<f64>> = probs.iter().zip(present).filter(|(_, &p)| p).map(|(v, _)| v).collect();
    let Some(first) = chosen.first() else {
        return Err(Error::NoPresentModality);
    };
    let t = first.len();
    if chosen.iter().any(|v| v.len() != t) {
        return Err(Error::invalid("late_fusion_mean", "task counts differ"));
    }
    Ok((0..t)
        .map(|k| chosen.iter().map(|v| v[k]).sum::<f64>() / chosen.len() as f64)
        .collect())
}

/// One training or evaluation instance.
#[derive(Clone, Debug)]
pub struct Example<'r> {
    pub record: &'r PreparedRecord,
    pub cutoff: f64,
    pub labels: Vec<Option<bool>>,
}

/// Output of one forward pass: a `[1, T]` probability vector per head set
/// (one for fused variants, one per modality for the late mean).
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Vec<Var>,
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub config: ModelConfig,
    pub n_parameters: usize,
    /// Parameter blob, relative to the manifest.
    pub params_file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamBlob {
    version: String,
    params: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, 0x6d_6f64_656c);
        let mut store = ParamStore::new();
        let with_sa = config.fusion.variant == Variant::ConcatSA;
        let net = match config.fusion.variant {
            Variant::LateMean => Network::Late {
                members: Modality::ALL
                    .iter()
                    .map(|&m| {
                        let name = format!("late.{m}");
                        let b = ModalityBranch::new(&mut store, &name, m, &config, &mut rng);
                        let f = FusionHead::new(&mut store, &format!("{name}.fusion"), 1, false, &config, &mut rng);
                        (b, f)
                    })
                    .collect(),
            },
            v => {
                let branches: Vec<ModalityBranch> = v
                    .modalities()
                    .into_iter()
                    .map(|m| ModalityBranch::new(&mut store, m.name(), m, &config, &mut rng))
                    .collect();
                let fusion = FusionHead::new(&mut store, "fusion", branches.len(), with_sa, &config, &mut rng);
                Network::Fused { branches, fusion }
            }
        };
        Ok(Self { config, store, net })
    }

    /// Records the forward pass for one patient with parameter values from
    /// `store` (normally `self.store`). Dropout is applied only when
    /// `dropout_rng` is given.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        record: &PreparedRecord,
        cutoff: f64,
        dropout_rng: Option<&mut SeededRng>,
        traces: Option<&mut Traces>,
    ) -> Result<Forward> {
        match &self.net {
            Network::Fused { branches, fusion } => {
                let mut reps = encode_modalities(tape, store, branches, record, cutoff, traces)?;
                let present = reps.iter().map(|r| r.present).collect();
                if let Some(rng) = dropout_rng {
                    reps = modality_dropout(tape, store, branches, reps, rng, self.config.fusion.p_modality_drop, true);
                }
                let vars: Vec<Var> = reps.iter().map(|r| r.rep).collect();
                Ok(Forward {
                    probs: vec![fusion.forward(tape, store, &vars)?],
                    present,
                })
            }
            Network::Late { members } => {
                let mut traces = traces;
                let mut probs = Vec::with_capacity(members.len());
                let mut present = Vec::with_capacity(members.len());
                for (branch, head) in members {
                    let enc = encode_modalities(tape, store, std::slice::from_ref(branch), record, cutoff, traces.as_deref_mut())?;
                    probs.push(head.forward(tape, store, &[enc[0].rep])?);
                    present.push(enc[0].present);
                }
                Ok(Forward { probs, present })
            }
        }
    }

    /// Masked BCE over a batch, averaged over head sets. `None` when no
    /// label in the batch is defined.
    pub fn batch_loss<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        batch: &[Example<'_>],
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<Option<Var>> {
        let t = self.config.n_tasks;
        let mut targets = Vec::with_capacity(batch.len() * t);
        let mut mask = Vec::with_capacity(batch.len() * t);
        let mut per_set: Vec<Vec<Var>> = Vec::new();
        for ex in batch {
            if ex.labels.len() != t {
                return Err(Error::invalid("batch_loss", format!("expected {t} labels, got {}", ex.labels.len())));
            }
            for l in &ex.labels {
                targets.push(if *l == Some(true) { 1.0 } else { 0.0 });
                mask.push(l.is_some());
            }
            let out = self.forward(tape, store, ex.record, ex.cutoff, dropout_rng.as_deref_mut(), None)?;
            per_set.resize_with(out.probs.len(), Vec::new);
            for (set, p) in per_set.iter_mut().zip(out.probs) {
                set.push(p);
            }
        }
        if !mask.iter().any(|&m| m) {
            return Ok(None);
        }
        let n_sets = per_set.len();
        let mut total: Option<Var> = None;
        for set in per_set {
            let all = tape.concat(&set)?;
            let l = tape.bce(all, targets.clone(), mask.clone())?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("at least one head set");
        if n_sets == 1 {
            Ok(Some(total))
        } else {
            Ok(Some(tape.affine(total, 1.0 / n_sets as f64, 0.0)?))
        }
    }

    /// One Adam step on `batch`. Returns the loss, or `None` for a batch
    /// without any defined label.
    pub fn train_step(
        &mut self,
        adam: &mut Adam,
        batch: &[Example<'_>],
        rng: &mut SeededRng,
        epoch: usize,
        batch_index: usize,
    ) -> Result<Option<f64>> {
        let non_finite = |e: Error| match e {
            Error::NonFiniteInput { .. } => Error::NonFiniteLoss { epoch, batch: batch_index },
            e => e,
        };
        let (loss, grads) = {
            let mut tape = Tape::new();
            let Some(l) = self.batch_loss(&mut tape, &self.store, batch, Some(rng)).map_err(non_finite)? else {
                return Ok(None);
            };
            let loss = tape.scalar(l);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_index });
            }
            let g = tape.backward(l).map_err(non_finite)?;
            (loss, tape.param_grads(&g)?)
        };
        self.store.zero_grad();
        self.store.accumulate_grads(&grads);
        adam.step(&mut self.store)?;
        Ok(Some(loss))
    }

    fn probabilities(&self, record: &PreparedRecord, cutoff: f64, traces: Option<&mut Traces>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.store, record, cutoff, None, traces)?;
        let probs: Vec<Vec<f64>> = out.probs.iter().map(|&p| tape.value(p).to_vec()).collect();
        match self.net {
            Network::Fused { .. } => Ok(probs.into_iter().next().expect("one head set")),
            Network::Late { .. } => {
                if out.present.iter().any(|&p| p) {
                    late_fusion_mean(&probs, &out.present)
                } else {
                    late_fusion_mean(&probs, &vec![true; probs.len()])
                }
            }
        }
    }

    /// Task probabilities at `cutoff`, without dropout.
    pub fn predict(&self, record: &PreparedRecord, cutoff: f64) -> Result<Vec<f64>> {
        self.probabilities(record, cutoff, None)
    }

    /// As [`Model::predict`], also returning the encoder attention weights.
    pub fn predict_traced(&self, record: &PreparedRecord, cutoff: f64) -> Result<(Vec<f64>, Traces)> {
        let mut traces = Traces::new();
        let p = self.probabilities(record, cutoff, Some(&mut traces))?;
        Ok((p, traces))
    }

    /// Writes `<stem>.manifest.json` and `<stem>.params.json` into `dir`
    /// and returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let params_file = format!("{stem}.params.json");
        let blob = ParamBlob {
            version: MODEL_FORMAT_VERSION.into(),
            params: self
                .store
                .iter()
                .map(|(_, name, t)| BlobEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let manifest = Manifest {
            version: MODEL_FORMAT_VERSION.into(),
            config: self.config.clone(),
            n_parameters: self.store.num_scalars(),
            params_file: params_file.clone(),
        };
        let params_path = dir.join(&params_file);
        let text = serde_json::to_string(&blob).map_err(|e| Error::json(&params_path, e))?;
        fs::write(&params_path, text).map_err(|e| Error::io(&params_path, e))?;
        let manifest_path = dir.join(format!("{stem}.manifest.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Rebuilds the model from its manifest and loads every parameter by
    /// name.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
        if manifest.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "model format '{}' is not supported (expected '{MODEL_FORMAT_VERSION}')",
                manifest.version
            )));
        }
        let params_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.params_file);
        let text = fs::read_to_string(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let blob: ParamBlob = serde_json::from_str(&text).map_err(|e| Error::json(&params_path, e))?;
        if blob.version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!("parameter blob format '{}' is not supported", blob.version)));
        }
        let mut model = Model::init(manifest.config)?;
        if blob.params.len() != model.store.len() {
            return Err(Error::Config(format!(
                "parameter blob holds {} tensors, model expects {}",
                blob.params.len(),
                model.store.len()
            )));
        }
        for entry in blob.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter '{}'", entry.name)))?;
            let t = model.store.get_mut(id);
            if t.shape() != entry.shape.as_slice() || entry.data.len() != t.numel() {
                return Err(Error::Config(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&entry.data);
        }
        Ok(model)
    }
}
