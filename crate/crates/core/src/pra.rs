//! Prototype-anchored representation alignment.
//!
//! For every target modality `m` (observed or not) a query is built from a
//! learned prototype and an availability token, the query attends over the
//! other modalities' unified features with missing ones blocked, and the
//! result is gated against the modality's own feature before a shared layer
//! norm. Missing modalities therefore get a completed representation while
//! never acting as a source of information.

use rand::Rng;

use crate::encoders::{FeatureBundle, ModalityMask};
use crate::model::{ModelParams, NormParams};
use crate::params::{gaussian_row, Linear, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the prototype and availability token initialization.
pub const PROTOTYPE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct PraParams {
    pub prototypes: Vec<ParamId>,
    pub token_observed: ParamId,
    pub token_missing: ParamId,
    /// `2D → D` query maps, one per modality.
    pub query_maps: Vec<Linear>,
    /// `2D → 1` (or `2D → D` with vector gates), one per modality.
    pub gates: Vec<Linear>,
    /// Per-target projections; empty in literal mode.
    pub attention: Vec<AttentionParams>,
    pub heads: usize,
    pub literal: bool,
    pub vector_gate: bool,
}

impl PraParams {
    pub fn new(
        store: &mut ParamStore,
        modalities: usize,
        dim: usize,
        heads: usize,
        literal: bool,
        vector_gate: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let prototypes = (0..modalities)
            .map(|m| store.register(format!("pra.prototype.{m}"), gaussian_row(dim, PROTOTYPE_INIT_STD, rng)))
            .collect();
        let token_observed = store.register("pra.token.observed", gaussian_row(dim, PROTOTYPE_INIT_STD, rng));
        let token_missing = store.register("pra.token.missing", gaussian_row(dim, PROTOTYPE_INIT_STD, rng));
        let query_maps = (0..modalities)
            .map(|m| Linear::new(store, &format!("pra.query_map.{m}"), 2 * dim, dim, rng))
            .collect();
        let gate_out = if vector_gate { dim } else { 1 };
        let gates = (0..modalities)
            .map(|m| Linear::new(store, &format!("pra.gate.{m}"), 2 * dim, gate_out, rng))
            .collect();
        let attention = if literal {
            Vec::new()
        } else {
            (0..modalities)
                .map(|m| AttentionParams {
                    query: Linear::new(store, &format!("pra.attn.{m}.query"), dim, dim, rng),
                    key: Linear::new(store, &format!("pra.attn.{m}.key"), dim, dim, rng),
                    value: Linear::new(store, &format!("pra.attn.{m}.value"), dim, dim, rng),
                    output: Linear::new(store, &format!("pra.attn.{m}.output"), dim, dim, rng),
                })
                .collect()
        };
        Self {
            prototypes,
            token_observed,
            token_missing,
            query_maps,
            gates,
            attention,
            heads: if literal { 1 } else { heads },
            literal,
            vector_gate,
        }
    }
}

/// Tape handles for one aligned batch.
#[derive(Clone, Debug)]
pub struct AlignedVars {
    pub z: Vec<Var>,
    /// Gate per modality (`B × 1`, or `B × D` for vector gates). Only rows
    /// where the modality is observed carry meaning.
    pub alpha: Vec<Var>,
    pub h_hat: Vec<Var>,
    /// `attention[m][head]` is the `B × (M−1)` weight matrix over the context
    /// modalities of target `m` in ascending index order.
    pub attention: Vec<Vec<Var>>,
}

/// Context modalities for target `m`, ascending with `m` removed.
pub fn context_order(m: usize, modalities: usize) -> Vec<usize> {
    (0..modalities).filter(|&j| j != m).collect()
}

/// `q = φ_m([P_m ∥ a])` with `a` the observed or missing token per row.
pub fn build_query(
    tape: &mut Tape,
    vars: &[Var],
    pra: &PraParams,
    m: usize,
    masks: &[ModalityMask],
) -> Var {
    let rows = masks.len();
    let observed: Vec<bool> = masks.iter().map(|mask| mask.is_observed(m)).collect();
    let t_obs = tape.broadcast_rows(vars[pra.token_observed.0], rows);
    let t_mis = tape.broadcast_rows(vars[pra.token_missing.0], rows);
    let availability = tape.select_rows(&observed, t_obs, t_mis);
    let prototype = tape.broadcast_rows(vars[pra.prototypes[m].0], rows);
    let joined = tape.concat(&[prototype, availability]);
    pra.query_maps[m].apply(tape, vars, joined)
}

/// Masked multi-head cross-attention of target `m` over the other modalities.
///
/// Returns the refinement `ĥ_m` and the per-head attention weights. Rows whose
/// context is entirely missing get `ĥ_m = 0`.
pub fn attend(
    tape: &mut Tape,
    vars: &[Var],
    pra: &PraParams,
    m: usize,
    query: Var,
    h: &[Var],
    masks: &[ModalityMask],
) -> (Var, Vec<Var>) {
    let rows = masks.len();
    let dim = tape.value(query).cols();
    let context = context_order(m, h.len());
    if context.is_empty() {
        let zero = tape.constant(Tensor::zeros(rows, dim));
        return (zero, Vec::new());
    }
    let open: Vec<bool> = masks
        .iter()
        .flat_map(|mask| context.iter().map(move |&j| mask.is_observed(j)))
        .collect();
    let any_open: Vec<bool> = masks
        .iter()
        .map(|mask| context.iter().any(|&j| mask.is_observed(j)))
        .collect();

    let (q, keys, values) = if pra.literal {
        let ctx: Vec<Var> = context.iter().map(|&j| h[j]).collect();
        (query, ctx.clone(), ctx)
    } else {
        let proj = &pra.attention[m];
        let q = proj.query.apply(tape, vars, query);
        let keys = context.iter().map(|&j| proj.key.apply(tape, vars, h[j])).collect();
        let values = context.iter().map(|&j| proj.value.apply(tape, vars, h[j])).collect();
        (q, keys, values)
    };

    let heads = pra.heads;
    let head_dim = dim / heads;
    let q = tape.scale(q, 1.0 / (head_dim as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * head_dim, (head + 1) * head_dim);
        let q_h = if heads == 1 { q } else { tape.slice(q, lo, hi) };
        let scores: Vec<Var> = keys
            .iter()
            .map(|&k| {
                let k_h = if heads == 1 { k } else { tape.slice(k, lo, hi) };
                let prod = tape.mul(q_h, k_h);
                tape.row_sum(prod)
            })
            .collect();
        let scores = tape.concat(&scores);
        let w = tape.masked_softmax(scores, &open);
        let mut out: Option<Var> = None;
        for (pos, &v) in values.iter().enumerate() {
            let v_h = if heads == 1 { v } else { tape.slice(v, lo, hi) };
            let w_j = tape.slice(w, pos, pos + 1);
            let term = tape.mul_col(v_h, w_j);
            out = Some(match out {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        head_outputs.push(out.expect("non-empty context"));
        weights.push(w);
    }
    let merged = if heads == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs)
    };
    let refined = if pra.literal {
        merged
    } else {
        pra.attention[m].output.apply(tape, vars, merged)
    };
    (tape.zero_rows(refined, &any_open), weights)
}

/// Gate the own feature against the refinement and normalize:
/// `α = σ(ψ_m([h ∥ ĥ]))`, `f = α·h + (1−α)·ĥ`, `z = LN(δ·f + (1−δ)·ĥ)`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    tape: &mut Tape,
    vars: &[Var],
    pra: &PraParams,
    norm: &NormParams,
    m: usize,
    h: Var,
    h_hat: Var,
    masks: &[ModalityMask],
) -> (Var, Var) {
    let observed: Vec<bool> = masks.iter().map(|mask| mask.is_observed(m)).collect();
    let joined = tape.concat(&[h, h_hat]);
    let pre = pra.gates[m].apply(tape, vars, joined);
    let alpha = tape.sigmoid(pre);
    let diff = tape.sub(h, h_hat);
    let gated = if pra.vector_gate {
        tape.mul(diff, alpha)
    } else {
        tape.mul_col(diff, alpha)
    };
    let fused = tape.add(h_hat, gated);
    let selected = tape.select_rows(&observed, fused, h_hat);
    let z = norm.apply(tape, vars, selected);
    (z, alpha)
}

/// Run query construction, attention and calibration for every modality.
pub fn align(
    tape: &mut Tape,
    vars: &[Var],
    pra: &PraParams,
    norm: &NormParams,
    h: &[Var],
    masks: &[ModalityMask],
) -> AlignedVars {
    let modalities = h.len();
    let mut out = AlignedVars {
        z: Vec::with_capacity(modalities),
        alpha: Vec::with_capacity(modalities),
        h_hat: Vec::with_capacity(modalities),
        attention: Vec::with_capacity(modalities),
    };
    for m in 0..modalities {
        let q = build_query(tape, vars, pra, m, masks);
        let (h_hat, weights) = attend(tape, vars, pra, m, q, h, masks);
        let (z, alpha) = calibrate(tape, vars, pra, norm, m, h[m], h_hat, masks);
        out.z.push(z);
        out.alpha.push(alpha);
        out.h_hat.push(h_hat);
        out.attention.push(weights);
    }
    out
}

/// Aligned representations of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedBundle {
    pub z: Vec<Vec<f64>>,
    /// Gate values; `None` for missing modalities.
    pub alpha: Vec<Option<Vec<f64>>>,
    pub h_hat: Vec<Vec<f64>>,
    /// `attention[m][head]` weights over the context modalities of `m`.
    pub attention: Vec<Vec<Vec<f64>>>,
}

/// Align a single feature bundle. Returns `None` when the model was built
/// without alignment.
pub fn align_bundle(bundle: &FeatureBundle, params: &ModelParams) -> Option<AlignedBundle> {
    let pra = params.pra.as_ref()?;
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let h: Vec<Var> = bundle
        .h
        .iter()
        .map(|row| tape.constant(Tensor::row(row.clone())))
        .collect();
    let masks = [bundle.mask];
    let aligned = align(&mut tape, &vars, pra, &params.norm, &h, &masks);
    let row = |tape: &Tape, v: Var| tape.value(v).data().to_vec();
    Some(AlignedBundle {
        z: aligned.z.iter().map(|&v| row(&tape, v)).collect(),
        alpha: aligned
            .alpha
            .iter()
            .enumerate()
            .map(|(m, &v)| bundle.mask.is_observed(m).then(|| row(&tape, v)))
            .collect(),
        h_hat: aligned.h_hat.iter().map(|&v| row(&tape, v)).collect(),
        attention: aligned
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&v| row(&tape, v)).collect())
            .collect(),
    })
}
