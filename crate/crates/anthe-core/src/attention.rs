//! Multi-head scaled dot-product attention with pre-attention gating.
//!
//! The gating family generalizes the KgV construction: for a gate "XgY" the
//! stream Y keeps its own projection and is multiplied elementwise by
//! `sigmoid(W_X X)`, the gating stream X passes to attention *unprojected*
//! (its projection is consumed by the gate), and the remaining stream gets
//! its plain projection. This keeps the parameter count identical to the
//! ungated layout for every gate kind.

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::scalar::Scalar;
use crate::tc::{tc_forward, TcShapePlan};

/// The three attention streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Q,
    K,
    V,
}

/// Pre-attention gate selection. `XgY` reads "X gates Y".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateKind {
    #[default]
    None,
    KgV,
    KgQ,
    QgV,
    QgK,
    VgK,
    VgQ,
}

impl GateKind {
    pub const ALL: [GateKind; 7] = [
        GateKind::None,
        GateKind::KgV,
        GateKind::KgQ,
        GateKind::QgV,
        GateKind::QgK,
        GateKind::VgK,
        GateKind::VgQ,
    ];

    /// Serialized name.
    pub fn name(self) -> &'static str {
        match self {
            GateKind::None => "none",
            GateKind::KgV => "KgV",
            GateKind::KgQ => "KgQ",
            GateKind::QgV => "QgV",
            GateKind::QgK => "QgK",
            GateKind::VgK => "VgK",
            GateKind::VgQ => "VgQ",
        }
    }

    pub fn parse(s: &str) -> Result<GateKind> {
        GateKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown gate kind {s:?}; expected one of none, KgV, KgQ, QgV, QgK, VgK, VgQ"
                ))
            })
    }

    /// `(gater, gated)` streams, or `None` for the ungated kind.
    pub fn pair(self) -> Option<(Stream, Stream)> {
        match self {
            GateKind::None => None,
            GateKind::KgV => Some((Stream::K, Stream::V)),
            GateKind::KgQ => Some((Stream::K, Stream::Q)),
            GateKind::QgV => Some((Stream::Q, Stream::V)),
            GateKind::QgK => Some((Stream::Q, Stream::K)),
            GateKind::VgK => Some((Stream::V, Stream::K)),
            GateKind::VgQ => Some((Stream::V, Stream::Q)),
        }
    }

    /// Whether the gate couples the query to a key/value stream. Such pairs
    /// require equal sequence lengths, which cross-attention cannot supply.
    pub fn couples_query(self) -> bool {
        matches!(
            self,
            GateKind::KgQ | GateKind::QgV | GateKind::QgK | GateKind::VgQ
        )
    }
}

/// A linear map on the tape: absent, dense (optionally biased), or a TC
/// chain (never biased).
pub enum Projection {
    Identity,
    Dense { w: TensorId, b: Option<TensorId> },
    Chain { factors: Vec<TensorId>, plan: TcShapePlan },
}

impl Projection {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: TensorId) -> Result<TensorId> {
        match self {
            Projection::Identity => Ok(x),
            Projection::Dense { w, b } => {
                let y = g.matmul(x, *w)?;
                match b {
                    Some(b) => g.add(y, *b),
                    None => Ok(y),
                }
            }
            Projection::Chain { factors, plan } => tc_forward(g, x, factors, plan),
        }
    }
}

/// Parameters of one attention block.
pub struct AttentionParams {
    pub w_q: Projection,
    pub w_k: Projection,
    pub w_v: Projection,
    pub w_o: Projection,
    pub gate: GateKind,
    pub d_h: usize,
    /// When false all three stream projections are identity and gated
    /// variants reduce to `Y * sigmoid(X)`.
    pub patt_enabled: bool,
}

impl AttentionParams {
    fn projection(&self, s: Stream) -> &Projection {
        match s {
            Stream::Q => &self.w_q,
            Stream::K => &self.w_k,
            Stream::V => &self.w_v,
        }
    }
}

/// Applies the pre-attention stage: projections and the selected gate.
///
/// For gated kinds the gater and gated streams must agree in shape (their
/// elementwise product requires it); cross-attention can therefore only use
/// gates that pair K with V.
pub fn gate_streams<T: Scalar>(
    g: &mut Graph<T>,
    params: &AttentionParams,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId, TensorId)> {
    let id = |s: Stream| match s {
        Stream::Q => q,
        Stream::K => k,
        Stream::V => v,
    };
    let project = |g: &mut Graph<T>, params: &AttentionParams, s: Stream| -> Result<TensorId> {
        if params.patt_enabled {
            params.projection(s).apply(g, id(s))
        } else {
            Ok(id(s))
        }
    };

    let Some((gater, gated)) = params.gate.pair() else {
        return Ok((
            project(g, params, Stream::Q)?,
            project(g, params, Stream::K)?,
            project(g, params, Stream::V)?,
        ));
    };

    if g.value(id(gater)).shape() != g.value(id(gated)).shape() {
        return Err(Error::dimension(format!(
            "gate {} needs matching gater/gated shapes, got {:?} vs {:?}",
            params.gate.name(),
            g.value(id(gater)).shape(),
            g.value(id(gated)).shape()
        )));
    }

    let gate_pre = project(g, params, gater)?;
    let gate_sig = g.sigmoid(gate_pre)?;
    let gated_proj = project(g, params, gated)?;
    let gated_out = g.mul(gated_proj, gate_sig)?;
    // The gating stream passes unprojected; its projection lives inside the
    // sigmoid. The remaining stream gets its plain projection.
    let mut out = [q, k, v];
    let set = |out: &mut [TensorId; 3], s: Stream, t: TensorId| match s {
        Stream::Q => out[0] = t,
        Stream::K => out[1] = t,
        Stream::V => out[2] = t,
    };
    set(&mut out, gated, gated_out);
    set(&mut out, gater, id(gater));
    for s in [Stream::Q, Stream::K, Stream::V] {
        if s != gated && s != gater {
            let t = project(g, params, s)?;
            set(&mut out, s, t);
        }
    }
    Ok((out[0], out[1], out[2]))
}

/// Per-head attention scale `1 / sqrt(d_model / d_h)`.
pub fn attn_scale(d_model: usize, d_h: usize) -> f64 {
    1.0 / ((d_model / d_h) as f64).sqrt()
}

/// Scaled dot-product attention over `d_h` heads.
///
/// Streams are `[batch, t, d_model]` and already gated; `mask` is additive
/// (`-inf` at disallowed positions) and broadcastable to
/// `[batch, d_h, t_q, t_k]`. Attention probabilities are dropped out at
/// `p_drop` (pass 0 in eval mode).
pub fn multi_head_attention<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    params: &AttentionParams,
    q_s: TensorId,
    k_s: TensorId,
    v_s: TensorId,
    mask: Option<TensorId>,
    p_drop: f64,
    rng: &mut R,
) -> Result<TensorId> {
    let qs = g.value(q_s).shape().to_vec();
    let ks = g.value(k_s).shape().to_vec();
    let vs = g.value(v_s).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::dimension(format!(
            "attention streams must be [batch, t, d_model], got {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let (b, t_q, d) = (qs[0], qs[1], qs[2]);
    let t_k = ks[1];
    if ks[0] != b || vs[0] != b || ks[2] != d || vs[2] != d || vs[1] != t_k {
        return Err(Error::dimension(format!(
            "inconsistent stream shapes {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let h = params.d_h;
    if h == 0 || d % h != 0 {
        return Err(Error::dimension(format!(
            "d_model {d} not divisible by head count {h}"
        )));
    }
    let hd = d / h;

    let split = |g: &mut Graph<T>, x: TensorId, t: usize| -> Result<TensorId> {
        let r = g.reshape(x, vec![b, t, h, hd])?;
        g.permute(r, vec![0, 2, 1, 3])
    };
    let qh = split(g, q_s, t_q)?;
    let kh = split(g, k_s, t_k)?;
    let vh = split(g, v_s, t_k)?;

    let kt = g.permute(kh, vec![0, 1, 3, 2])?;
    let logits = g.matmul(qh, kt)?;
    let mut scores = g.scale(logits, T::from_f64(attn_scale(d, h)))?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let probs = g.softmax(scores)?;
    let probs = g.dropout(probs, p_drop, rng)?;
    let ctx = g.matmul(probs, vh)?;
    let merged = g.permute(ctx, vec![0, 2, 1, 3])?;
    let flat = g.reshape(merged, vec![b, t_q, d])?;
    params.w_o.apply(g, flat)
}

/// Additive causal mask `[1, 1, t, t]`: position `i` may attend to `j <= i`.
pub fn causal_mask<T: Scalar>(t: usize) -> Array<T> {
    let mut m = Array::zeros(&[1, 1, t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = T::neg_infinity();
        }
    }
    m
}

/// Additive key-padding mask `[batch, 1, 1, t_k]` from per-position
/// keep-flags (`true` = real token).
pub fn key_padding_mask<T: Scalar>(keep: &[bool], batch: usize, t_k: usize) -> Result<Array<T>> {
    if keep.len() != batch * t_k {
        return Err(Error::dimension(format!(
            "expected {} flags for a {}x{} mask, got {}",
            batch * t_k,
            batch,
            t_k,
            keep.len()
        )));
    }
    let data = keep
        .iter()
        .map(|&k| if k { T::zero() } else { T::neg_infinity() })
        .collect();
    Array::new(vec![batch, 1, 1, t_k], data)
}
