//! Hierarchical Soft Part-of-Speech (H-SoftPOS) embeddings.
//!
//! A narrow token embedding plus truncated sinusoidal positional encoding
//! forms level 1. Each further level applies a causal dilated kernel-3
//! convolution to the previous level. Every level contributes both its raw
//! features and a "SoftPOS" mixture — a softmax over its first `n_sp`
//! channels times a learned `n_sp x d_sp` table — and the concatenation of
//! all parts restores width `d_model` at a fraction of a full embedding's
//! parameter count.

use rand::Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::init::{glorot_uniform, normal_std};
use crate::scalar::Scalar;

/// Shape configuration. `d_sp` and `d_emb` are derived:
/// `d_sp = floor(d_model / (2 l_sp))`, `d_emb = d_model - (2 l_sp - 1) d_sp`,
/// so that `d_emb + (2 l_sp - 1) d_sp = d_model` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HSoftPosConfig {
    pub d_model: usize,
    pub n_vocab: usize,
    /// Hierarchy depth (number of levels).
    pub l_sp: usize,
    /// Soft POS categories per level.
    pub n_sp: usize,
}

impl HSoftPosConfig {
    pub fn new(d_model: usize, n_vocab: usize, l_sp: usize, n_sp: usize) -> Result<Self> {
        let cfg = HSoftPosConfig {
            d_model,
            n_vocab,
            l_sp,
            n_sp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_sp < 1 {
            return Err(Error::config("hsoftpos needs l_sp >= 1"));
        }
        if self.n_vocab < 1 {
            return Err(Error::config("hsoftpos needs a non-empty vocabulary"));
        }
        if self.d_model < 2 * self.l_sp {
            return Err(Error::config(format!(
                "d_model {} too small for l_sp {}: d_sp would be zero",
                self.d_model, self.l_sp
            )));
        }
        if self.d_emb() < 1 {
            return Err(Error::config(format!(
                "d_model {} and l_sp {} leave no token-embedding channels",
                self.d_model, self.l_sp
            )));
        }
        if self.n_sp < 1 || self.n_sp > self.d_emb().min(self.d_sp()) {
            return Err(Error::config(format!(
                "n_sp {} must lie in 1..=min(d_emb {}, d_sp {}) so the softmax slice is valid",
                self.n_sp,
                self.d_emb(),
                self.d_sp()
            )));
        }
        Ok(())
    }

    /// Width of each convolution level and each SoftPOS table.
    pub fn d_sp(&self) -> usize {
        self.d_model / (2 * self.l_sp)
    }

    /// Width of the level-1 token embedding.
    pub fn d_emb(&self) -> usize {
        self.d_model - (2 * self.l_sp - 1) * self.d_sp()
    }

    /// Exact learnable-scalar count: the token table, one biased kernel-3
    /// convolution per level past the first, and one SoftPOS table per
    /// level.
    pub fn param_count(&self) -> usize {
        let (d_sp, d_emb) = (self.d_sp(), self.d_emb());
        let mut total = self.n_vocab * d_emb;
        for l in 2..=self.l_sp {
            let c_in = if l == 2 { d_emb } else { d_sp };
            total += 3 * c_in * d_sp + d_sp;
        }
        total + self.l_sp * self.n_sp * d_sp
    }

    /// Number of tensors in the canonical parameter order.
    pub fn tensor_count(&self) -> usize {
        1 + 2 * (self.l_sp - 1) + self.l_sp
    }
}

/// Tape handles for one embedding's parameters, in canonical order: token
/// table, then `(kernel, bias)` per level `2..=l_sp`, then one SoftPOS table
/// per level `1..=l_sp`.
pub struct HSoftPosParams {
    pub table: TensorId,
    pub convs: Vec<(TensorId, TensorId)>,
    pub w_sp: Vec<TensorId>,
}

impl HSoftPosParams {
    /// Reassemble from a flat id slice laid out in canonical order.
    pub fn from_ids(cfg: &HSoftPosConfig, ids: &[TensorId]) -> Result<HSoftPosParams> {
        if ids.len() != cfg.tensor_count() {
            return Err(Error::contract(format!(
                "hsoftpos expects {} parameter tensors, got {}",
                cfg.tensor_count(),
                ids.len()
            )));
        }
        let table = ids[0];
        let mut convs = Vec::with_capacity(cfg.l_sp - 1);
        for l in 0..cfg.l_sp - 1 {
            convs.push((ids[1 + 2 * l], ids[2 + 2 * l]));
        }
        let w_sp = ids[1 + 2 * (cfg.l_sp - 1)..].to_vec();
        Ok(HSoftPosParams {
            table,
            convs,
            w_sp,
        })
    }
}

/// Fresh parameter values in canonical order: the token table is normal with
/// std 0.02, convolution kernels and SoftPOS tables Glorot-uniform, biases
/// zero.
pub fn init<T: Scalar, R: Rng>(cfg: &HSoftPosConfig, rng: &mut R) -> Vec<Array<T>> {
    let (d_sp, d_emb) = (cfg.d_sp(), cfg.d_emb());
    let mut out = Vec::with_capacity(cfg.tensor_count());
    out.push(normal_std(&[cfg.n_vocab, d_emb], 0.02, rng));
    for l in 2..=cfg.l_sp {
        let c_in = if l == 2 { d_emb } else { d_sp };
        out.push(glorot_uniform(&[3, c_in, d_sp], 3 * c_in, 3 * d_sp, rng));
        out.push(Array::zeros(&[d_sp]));
    }
    for _ in 1..=cfg.l_sp {
        out.push(glorot_uniform(&[cfg.n_sp, d_sp], cfg.n_sp, d_sp, rng));
    }
    out
}

/// Standard sinusoidal positional encoding `[t, width]`.
///
/// Frequencies follow the full `d_model` table; `width` keeps only the first
/// channels (the truncation used for the narrow level-1 embedding).
pub fn sinusoidal_encoding<T: Scalar>(t: usize, d_model: usize, width: usize) -> Array<T> {
    let mut data = Vec::with_capacity(t * width);
    for pos in 0..t {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64(v));
        }
    }
    Array::new(vec![t, width], data).expect("shape/data agree by construction")
}

/// Embeds a `[batch, t]` token batch to `[batch, t, d_model]`.
///
/// Level widths concatenate as `X_1, SoftPOS(X_1), X_2, SoftPOS(X_2), ...`;
/// level `l >= 2` is a causal convolution of the previous level with
/// dilation `2^l`.
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &HSoftPosConfig,
    params: &HSoftPosParams,
    tokens: &[usize],
    batch: usize,
    t: usize,
) -> Result<TensorId> {
    cfg.validate()?;
    if tokens.len() != batch * t {
        return Err(Error::dimension(format!(
            "expected {} tokens for a {}x{} batch, got {}",
            batch * t,
            batch,
            t,
            tokens.len()
        )));
    }
    let looked_up = g.gather(params.table, tokens, &[batch, t])?;
    let pe = g.input(sinusoidal_encoding::<T>(t, cfg.d_model, cfg.d_emb()));
    let x1 = g.add(looked_up, pe)?;

    let mut levels = vec![x1];
    for (l, &(w, b)) in (2..=cfg.l_sp).zip(&params.convs) {
        let prev = *levels.last().unwrap();
        let conv = g.causal_conv1d(prev, w, 1usize << l)?;
        levels.push(g.add(conv, b)?);
    }

    let mut parts = Vec::with_capacity(2 * cfg.l_sp);
    for (x, &w_sp) in levels.iter().zip(&params.w_sp) {
        let head = g.slice(*x, 2, 0, cfg.n_sp)?;
        let soft = g.softmax(head)?;
        let sp = g.matmul(soft, w_sp)?;
        parts.push(*x);
        parts.push(sp);
    }
    g.concat(&parts, 2)
}
