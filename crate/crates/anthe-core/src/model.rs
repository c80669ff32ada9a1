//! Model assembly: a declarative `ModelPlan` (every tensor's name, shape,
//! init, and census component plus the wiring roles), an exact parameter
//! census computed without allocating weights, parameter initialization,
//! the end-to-end forward pass, and greedy decoding.
//!
//! Topology is the post-layer-norm encoder/decoder Transformer: N encoder
//! blocks (self-attention, ff-block), N decoder blocks (causal
//! self-attention, cross-attention over the final encoder output,
//! ff-block), each sublayer wrapped as `x = LN(x + sublayer(x))`. The output
//! projection maps to vocabulary logits. Any linear named in the TC plan is
//! replaced by an implicit tensor-chain contraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::attention::{
    causal_mask, gate_streams, key_padding_mask, multi_head_attention, AttentionParams, GateKind,
    Projection,
};
use crate::config::{ArchConfig, EmbeddingKind, FfKind, TcEntry};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::hsoftpos::{self, HSoftPosConfig, HSoftPosParams};
use crate::init::{glorot_uniform, normal_std};
use crate::scalar::Scalar;
use crate::tc::{plan_factors, tc_forward, TcShapePlan};

const LN_EPS: f64 = 1e-5;

/// Census bucket for one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    EncoderEmbedding,
    DecoderEmbedding,
    Patt,
    AttentionOutput,
    Ff,
    LayerNorm,
    OutputProjection,
}

#[derive(Clone, Copy, Debug)]
pub enum InitKind {
    Glorot { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    One,
    Zero,
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub component: Component,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A linear map's tensors, as indices into the plan's tensor list.
#[derive(Clone, Debug)]
pub enum LinearRole {
    Dense { w: usize, b: Option<usize> },
    Chain { factors: Vec<usize>, plan: TcShapePlan },
}

impl LinearRole {
    fn projection(&self, ids: &[TensorId]) -> Projection {
        match self {
            LinearRole::Dense { w, b } => Projection::Dense {
                w: ids[*w],
                b: b.map(|i| ids[i]),
            },
            LinearRole::Chain { factors, plan } => Projection::Chain {
                factors: factors.iter().map(|&i| ids[i]).collect(),
                plan: plan.clone(),
            },
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, ids: &[TensorId], x: TensorId) -> Result<TensorId> {
        self.projection(ids).apply(g, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LnRole {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub struct AttnRole {
    /// `None` when pre-attention projections are disabled.
    pub patt: Option<(LinearRole, LinearRole, LinearRole)>,
    pub wo: LinearRole,
    pub ln: LnRole,
}

#[derive(Clone, Debug)]
pub enum FfRole {
    Ff {
        w1: LinearRole,
        w2: LinearRole,
    },
    Geglu {
        wg: LinearRole,
        w: LinearRole,
        wo: LinearRole,
    },
    /// Disabled ff-block: the residual stream passes through its layer norm
    /// untouched.
    Identity,
}

#[derive(Clone, Debug)]
pub struct FfSublayer {
    pub ff: FfRole,
    pub ln: LnRole,
}

#[derive(Clone, Debug)]
pub struct EncBlockRole {
    pub attn: AttnRole,
    pub ff: FfSublayer,
}

#[derive(Clone, Debug)]
pub struct DecBlockRole {
    pub self_attn: AttnRole,
    pub cross_attn: AttnRole,
    pub ff: FfSublayer,
}

#[derive(Clone, Debug)]
pub enum EmbedRole {
    FullDense {
        table: usize,
    },
    FullChain {
        factors: Vec<usize>,
        plan: TcShapePlan,
    },
    HSoftPos {
        cfg: HSoftPosConfig,
        ids: Vec<usize>,
    },
    /// Decoder side of a shared embedding; resolves to the encoder role.
    Tied,
}

#[derive(Clone, Debug)]
pub enum OutputRole {
    Dense {
        w: usize,
        b: usize,
    },
    Chain {
        factors: Vec<usize>,
        plan: TcShapePlan,
    },
    /// Transposed shared embedding table plus its own bias.
    Tied {
        table: usize,
        b: usize,
    },
}

/// Exact per-component learnable-scalar counts. Shared tensors are counted
/// once, under the encoder embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub encoder_embedding: usize,
    pub decoder_embedding: usize,
    pub patt: usize,
    pub attention_output: usize,
    pub ff: usize,
    pub layer_norms: usize,
    pub output_projection: usize,
    pub total: usize,
}

impl ParamCensus {
    pub fn components(&self) -> [(&'static str, usize); 7] {
        [
            ("encoder_embedding", self.encoder_embedding),
            ("decoder_embedding", self.decoder_embedding),
            ("patt", self.patt),
            ("attention_output", self.attention_output),
            ("ff", self.ff),
            ("layer_norms", self.layer_norms),
            ("output_projection", self.output_projection),
        ]
    }
}

/// The full structural description of one model. Building a plan allocates
/// no parameter storage, so the census is cheap at any vocabulary size.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub config: ArchConfig,
    pub tensors: Vec<TensorSpec>,
    /// Achieved compression ratio per TC placement, keyed `emb`/`ff`/
    /// `patt`/`output`.
    pub tc_actual: Vec<(String, f64)>,
    pub enc_embed: EmbedRole,
    pub dec_embed: EmbedRole,
    pub enc_blocks: Vec<EncBlockRole>,
    pub dec_blocks: Vec<DecBlockRole>,
    pub output: OutputRole,
}

struct PlanBuilder {
    tensors: Vec<TensorSpec>,
    tc_actual: Vec<(String, f64)>,
}

impl PlanBuilder {
    fn tensor(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: InitKind,
        component: Component,
    ) -> usize {
        self.tensors.push(TensorSpec {
            name,
            shape,
            init,
            component,
        });
        self.tensors.len() - 1
    }

    /// Registers a TC chain's factors; fans treat each factor as the matrix
    /// `[a_i * b_in, b_out * c_i]` it contracts as.
    fn chain(
        &mut self,
        name: &str,
        plan: &TcShapePlan,
        component: Component,
        label: &str,
    ) -> Vec<usize> {
        if !self.tc_actual.iter().any(|(l, _)| l == label) {
            self.tc_actual.push((label.to_string(), plan.r_actual));
        }
        let n = plan.n();
        plan.factor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let b_in = if i == 0 { 1 } else { plan.bond };
                let b_out = if i == n - 1 { 1 } else { plan.bond };
                self.tensor(
                    format!("{name}.f{i}"),
                    shape,
                    InitKind::Glorot {
                        fan_in: plan.a[i] * b_in,
                        fan_out: b_out * plan.c[i],
                    },
                    component,
                )
            })
            .collect()
    }

    /// A dense (biased) or TC (bias-free) linear of shape `n_in x n_out`.
    fn linear(
        &mut self,
        name: &str,
        n_in: usize,
        n_out: usize,
        tc: Option<TcEntry>,
        component: Component,
        label: &str,
    ) -> Result<LinearRole> {
        match tc {
            None => {
                let w = self.tensor(
                    format!("{name}.w"),
                    vec![n_in, n_out],
                    InitKind::Glorot {
                        fan_in: n_in,
                        fan_out: n_out,
                    },
                    component,
                );
                let b = self.tensor(format!("{name}.b"), vec![n_out], InitKind::Zero, component);
                Ok(LinearRole::Dense { w, b: Some(b) })
            }
            Some(e) => {
                let plan = plan_factors(n_in, n_out, e.n, e.r)?;
                let factors = self.chain(name, &plan, component, label);
                Ok(LinearRole::Chain { factors, plan })
            }
        }
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnRole {
        LnRole {
            gain: self.tensor(
                format!("{prefix}.ln.g"),
                vec![d],
                InitKind::One,
                Component::LayerNorm,
            ),
            bias: self.tensor(
                format!("{prefix}.ln.b"),
                vec![d],
                InitKind::Zero,
                Component::LayerNorm,
            ),
        }
    }

    fn embedding(
        &mut self,
        side: &str,
        cfg: &ArchConfig,
        component: Component,
    ) -> Result<EmbedRole> {
        match cfg.embedding_kind {
            EmbeddingKind::Full => match cfg.tc_plan.emb {
                None => Ok(EmbedRole::FullDense {
                    table: self.tensor(
                        format!("{side}.emb.table"),
                        vec![cfg.n_vocab, cfg.d_model],
                        InitKind::Normal { std: 0.02 },
                        component,
                    ),
                }),
                Some(e) => {
                    let plan = plan_factors(cfg.n_vocab, cfg.d_model, e.n, e.r)?;
                    let factors =
                        self.chain(&format!("{side}.emb.table"), &plan, component, "emb");
                    Ok(EmbedRole::FullChain { factors, plan })
                }
            },
            EmbeddingKind::HSoftPos => {
                let h = cfg.hsoftpos()?;
                let (d_sp, d_emb) = (h.d_sp(), h.d_emb());
                let mut ids = Vec::with_capacity(h.tensor_count());
                ids.push(self.tensor(
                    format!("{side}.emb.table"),
                    vec![h.n_vocab, d_emb],
                    InitKind::Normal { std: 0.02 },
                    component,
                ));
                for l in 2..=h.l_sp {
                    let c_in = if l == 2 { d_emb } else { d_sp };
                    ids.push(self.tensor(
                        format!("{side}.emb.conv{l}.w"),
                        vec![3, c_in, d_sp],
                        InitKind::Glorot {
                            fan_in: 3 * c_in,
                            fan_out: 3 * d_sp,
                        },
                        component,
                    ));
                    ids.push(self.tensor(
                        format!("{side}.emb.conv{l}.b"),
                        vec![d_sp],
                        InitKind::Zero,
                        component,
                    ));
                }
                for l in 1..=h.l_sp {
                    ids.push(self.tensor(
                        format!("{side}.emb.wsp{l}"),
                        vec![h.n_sp, d_sp],
                        InitKind::Glorot {
                            fan_in: h.n_sp,
                            fan_out: d_sp,
                        },
                        component,
                    ));
                }
                Ok(EmbedRole::HSoftPos { cfg: h, ids })
            }
        }
    }

    fn attn(&mut self, prefix: &str, cfg: &ArchConfig) -> Result<AttnRole> {
        let d = cfg.d_model;
        let patt = if cfg.patt_enabled {
            let wq = self.linear(
                &format!("{prefix}.wq"),
                d,
                d,
                cfg.tc_plan.patt,
                Component::Patt,
                "patt",
            )?;
            let wk = self.linear(
                &format!("{prefix}.wk"),
                d,
                d,
                cfg.tc_plan.patt,
                Component::Patt,
                "patt",
            )?;
            let wv = self.linear(
                &format!("{prefix}.wv"),
                d,
                d,
                cfg.tc_plan.patt,
                Component::Patt,
                "patt",
            )?;
            Some((wq, wk, wv))
        } else {
            None
        };
        // The head-merge projection is never factorized.
        let wo = self.linear(
            &format!("{prefix}.wo"),
            d,
            d,
            None,
            Component::AttentionOutput,
            "",
        )?;
        let ln = self.ln(prefix, d);
        Ok(AttnRole { patt, wo, ln })
    }

    fn ff_sublayer(&mut self, prefix: &str, cfg: &ArchConfig) -> Result<FfSublayer> {
        let d = cfg.d_model;
        let ff = if !cfg.ff_enabled {
            FfRole::Identity
        } else {
            match cfg.ff_kind {
                FfKind::Ff => FfRole::Ff {
                    w1: self.linear(
                        &format!("{prefix}.w1"),
                        d,
                        cfg.d_ff(),
                        cfg.tc_plan.ff,
                        Component::Ff,
                        "ff",
                    )?,
                    w2: self.linear(
                        &format!("{prefix}.w2"),
                        cfg.d_ff(),
                        d,
                        cfg.tc_plan.ff,
                        Component::Ff,
                        "ff",
                    )?,
                },
                FfKind::Geglu => FfRole::Geglu {
                    wg: self.linear(
                        &format!("{prefix}.wg"),
                        d,
                        cfg.d_geglu(),
                        cfg.tc_plan.ff,
                        Component::Ff,
                        "ff",
                    )?,
                    w: self.linear(
                        &format!("{prefix}.w"),
                        d,
                        cfg.d_geglu(),
                        cfg.tc_plan.ff,
                        Component::Ff,
                        "ff",
                    )?,
                    wo: self.linear(
                        &format!("{prefix}.wo"),
                        cfg.d_geglu(),
                        d,
                        cfg.tc_plan.ff,
                        Component::Ff,
                        "ff",
                    )?,
                },
            }
        };
        let ln = self.ln(prefix, d);
        Ok(FfSublayer { ff, ln })
    }
}

impl ModelPlan {
    pub fn new(config: ArchConfig) -> Result<ModelPlan> {
        config.validate()?;
        let mut b = PlanBuilder {
            tensors: Vec::new(),
            tc_actual: Vec::new(),
        };
        let enc_embed = b.embedding("enc", &config, Component::EncoderEmbedding)?;
        let dec_embed = if config.share_embeddings {
            EmbedRole::Tied
        } else {
            b.embedding("dec", &config, Component::DecoderEmbedding)?
        };
        let mut enc_blocks = Vec::with_capacity(config.n);
        for i in 0..config.n {
            enc_blocks.push(EncBlockRole {
                attn: b.attn(&format!("enc.b{i}.attn"), &config)?,
                ff: b.ff_sublayer(&format!("enc.b{i}.ff"), &config)?,
            });
        }
        let mut dec_blocks = Vec::with_capacity(config.n);
        for i in 0..config.n {
            dec_blocks.push(DecBlockRole {
                self_attn: b.attn(&format!("dec.b{i}.self"), &config)?,
                cross_attn: b.attn(&format!("dec.b{i}.cross"), &config)?,
                ff: b.ff_sublayer(&format!("dec.b{i}.ff"), &config)?,
            });
        }
        let output = if config.share_embeddings {
            let EmbedRole::FullDense { table } = enc_embed else {
                return Err(Error::config(
                    "share_embeddings requires a dense full embedding",
                ));
            };
            OutputRole::Tied {
                table,
                b: b.tensor(
                    "out.b".to_string(),
                    vec![config.n_vocab],
                    InitKind::Zero,
                    Component::OutputProjection,
                ),
            }
        } else {
            match config.tc_plan.output {
                None => {
                    let w = b.tensor(
                        "out.w".to_string(),
                        vec![config.d_model, config.n_vocab],
                        InitKind::Glorot {
                            fan_in: config.d_model,
                            fan_out: config.n_vocab,
                        },
                        Component::OutputProjection,
                    );
                    let bias = b.tensor(
                        "out.b".to_string(),
                        vec![config.n_vocab],
                        InitKind::Zero,
                        Component::OutputProjection,
                    );
                    OutputRole::Dense { w, b: bias }
                }
                Some(e) => {
                    let plan = plan_factors(config.d_model, config.n_vocab, e.n, e.r)?;
                    let factors = b.chain("out", &plan, Component::OutputProjection, "output");
                    OutputRole::Chain { factors, plan }
                }
            }
        };
        Ok(ModelPlan {
            config,
            tensors: b.tensors,
            tc_actual: b.tc_actual,
            enc_embed,
            dec_embed,
            enc_blocks,
            dec_blocks,
            output,
        })
    }

    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus {
            encoder_embedding: 0,
            decoder_embedding: 0,
            patt: 0,
            attention_output: 0,
            ff: 0,
            layer_norms: 0,
            output_projection: 0,
            total: 0,
        };
        for t in &self.tensors {
            let n = t.numel();
            c.total += n;
            match t.component {
                Component::EncoderEmbedding => c.encoder_embedding += n,
                Component::DecoderEmbedding => c.decoder_embedding += n,
                Component::Patt => c.patt += n,
                Component::AttentionOutput => c.attention_output += n,
                Component::Ff => c.ff += n,
                Component::LayerNorm => c.layer_norms += n,
                Component::OutputProjection => c.output_projection += n,
            }
        }
        c
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

/// A plan plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub plan: ModelPlan,
    pub params: Vec<Array<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Scalar> Model<T> {
    /// Initializes fresh parameters per the plan's init kinds, drawing from
    /// a ChaCha stream seeded with `seed` in tensor order.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Model<T>> {
        let plan = ModelPlan::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .tensors
            .iter()
            .map(|spec| match spec.init {
                InitKind::Glorot { fan_in, fan_out } => {
                    glorot_uniform(&spec.shape, fan_in, fan_out, &mut rng)
                }
                InitKind::Normal { std } => normal_std(&spec.shape, std, &mut rng),
                InitKind::One => Array::full(&spec.shape, T::one()),
                InitKind::Zero => Array::zeros(&spec.shape),
            })
            .collect();
        Ok(Model { plan, params })
    }

    pub fn census(&self) -> ParamCensus {
        self.plan.census()
    }

    /// Registers every parameter as a differentiable tape leaf.
    pub fn register(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.params.iter().map(|a| g.param(a.clone())).collect()
    }

    /// Registers parameters as frozen inputs (no gradients; eval paths).
    pub fn register_frozen(&self, g: &mut Graph<T>) -> Vec<TensorId> {
        self.params.iter().map(|a| g.input(a.clone())).collect()
    }
}

fn one_hot<T: Scalar>(tokens: &[usize], b: usize, t: usize, v: usize) -> Result<Array<T>> {
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= v) {
        return Err(Error::index(format!(
            "token {bad} out of range for vocabulary of {v}"
        )));
    }
    let mut x = Array::zeros(&[b, t, v]);
    for (i, &tok) in tokens.iter().enumerate() {
        x.data_mut()[i * v + tok] = T::one();
    }
    Ok(x)
}

fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    plan: &ModelPlan,
    ids: &[TensorId],
    role: &EmbedRole,
    tokens: &[usize],
    b: usize,
    t: usize,
) -> Result<TensorId> {
    let d = plan.config.d_model;
    match role {
        EmbedRole::Tied => embed_tokens(g, plan, ids, &plan.enc_embed, tokens, b, t),
        EmbedRole::FullDense { table } => {
            let e = g.gather(ids[*table], tokens, &[b, t])?;
            let pe = g.input(hsoftpos::sinusoidal_encoding::<T>(t, d, d));
            g.add(e, pe)
        }
        EmbedRole::FullChain { factors, plan: tp } => {
            let x = g.input(one_hot::<T>(tokens, b, t, plan.config.n_vocab)?);
            let f: Vec<TensorId> = factors.iter().map(|&i| ids[i]).collect();
            let e = tc_forward(g, x, &f, tp)?;
            let pe = g.input(hsoftpos::sinusoidal_encoding::<T>(t, d, d));
            g.add(e, pe)
        }
        EmbedRole::HSoftPos { cfg, ids: hidx } => {
            let hids: Vec<TensorId> = hidx.iter().map(|&i| ids[i]).collect();
            let p = HSoftPosParams::from_ids(cfg, &hids)?;
            hsoftpos::embed(g, cfg, &p, tokens, b, t)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_sublayer<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    ids: &[TensorId],
    role: &AttnRole,
    cfg: &ArchConfig,
    x_q: TensorId,
    x_kv: TensorId,
    mask: Option<TensorId>,
    is_cross: bool,
    p_drop: f64,
    rng: &mut R,
) -> Result<TensorId> {
    // Query-coupled gates need equal stream lengths, which cross-attention
    // cannot guarantee; those blocks fall back to ungated attention.
    let gate = if is_cross && cfg.gate.couples_query() {
        GateKind::None
    } else {
        cfg.gate
    };
    let (w_q, w_k, w_v) = match &role.patt {
        Some((wq, wk, wv)) => (
            wq.projection(ids),
            wk.projection(ids),
            wv.projection(ids),
        ),
        None => (Projection::Identity, Projection::Identity, Projection::Identity),
    };
    let params = AttentionParams {
        w_q,
        w_k,
        w_v,
        w_o: role.wo.projection(ids),
        gate,
        d_h: cfg.d_h,
        patt_enabled: cfg.patt_enabled,
    };
    let (q_s, k_s, v_s) = gate_streams(g, &params, x_q, x_kv, x_kv)?;
    let out = multi_head_attention(g, &params, q_s, k_s, v_s, mask, p_drop, rng)?;
    let res = g.add(x_q, out)?;
    g.layer_norm(res, ids[role.ln.gain], ids[role.ln.bias], LN_EPS)
}

fn ff_sublayer<T: Scalar>(
    g: &mut Graph<T>,
    ids: &[TensorId],
    role: &FfSublayer,
    x: TensorId,
) -> Result<TensorId> {
    let out = match &role.ff {
        FfRole::Ff { w1, w2 } => {
            let h = w1.apply(g, ids, x)?;
            let h = g.relu(h)?;
            Some(w2.apply(g, ids, h)?)
        }
        FfRole::Geglu { wg, w, wo } => {
            let gate = wg.apply(g, ids, x)?;
            let gate = g.gelu(gate)?;
            let lin = w.apply(g, ids, x)?;
            let prod = g.mul(gate, lin)?;
            Some(wo.apply(g, ids, prod)?)
        }
        FfRole::Identity => None,
    };
    let pre_ln = match out {
        Some(o) => g.add(x, o)?,
        None => x,
    };
    g.layer_norm(pre_ln, ids[role.ln.gain], ids[role.ln.bias], LN_EPS)
}

/// Runs the full encoder/decoder stack, producing logits
/// `[batch, t_tgt, n_vocab]`. In `Mode::Eval` dropout is disabled and `rng`
/// is never drawn from.
pub fn forward<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    plan: &ModelPlan,
    ids: &[TensorId],
    batch: &TokenBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<TensorId> {
    let cfg = &plan.config;
    let p_drop = match mode {
        Mode::Train => cfg.p_dropout,
        Mode::Eval => 0.0,
    };

    let src_pad = g.input(key_padding_mask::<T>(
        &batch.src_mask,
        batch.batch,
        batch.t_src,
    )?);
    let mut x = embed_tokens(g, plan, ids, &plan.enc_embed, &batch.src, batch.batch, batch.t_src)?;
    for blk in &plan.enc_blocks {
        x = attn_sublayer(g, ids, &blk.attn, cfg, x, x, Some(src_pad), false, p_drop, rng)?;
        x = ff_sublayer(g, ids, &blk.ff, x)?;
    }
    let enc_out = x;

    let causal = g.input(causal_mask::<T>(batch.t_tgt));
    let mut y = embed_tokens(
        g,
        plan,
        ids,
        &plan.dec_embed,
        &batch.tgt_in,
        batch.batch,
        batch.t_tgt,
    )?;
    for blk in &plan.dec_blocks {
        y = attn_sublayer(g, ids, &blk.self_attn, cfg, y, y, Some(causal), false, p_drop, rng)?;
        y = attn_sublayer(
            g,
            ids,
            &blk.cross_attn,
            cfg,
            y,
            enc_out,
            Some(src_pad),
            true,
            p_drop,
            rng,
        )?;
        y = ff_sublayer(g, ids, &blk.ff, y)?;
    }

    match &plan.output {
        OutputRole::Dense { w, b } => {
            let l = g.matmul(y, ids[*w])?;
            g.add(l, ids[*b])
        }
        OutputRole::Chain { factors, plan: tp } => {
            let f: Vec<TensorId> = factors.iter().map(|&i| ids[i]).collect();
            tc_forward(g, y, &f, tp)
        }
        OutputRole::Tied { table, b } => {
            let wt = g.permute(ids[*table], vec![1, 0])?;
            let l = g.matmul(y, wt)?;
            g.add(l, ids[*b])
        }
    }
}

/// Forward plus masked cross-entropy over target-out.
pub fn loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    plan: &ModelPlan,
    ids: &[TensorId],
    batch: &TokenBatch,
    mode: Mode,
    rng: &mut R,
) -> Result<(TensorId, TensorId)> {
    let logits = forward(g, plan, ids, batch, mode, rng)?;
    let l = g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_out_mask)?;
    Ok((l, logits))
}

/// Builds a batch for incremental decoding: full sources, current target
/// prefixes as target-in. Target-out fields are placeholders (no loss).
fn inference_batch(src_rows: &[Vec<usize>], prefixes: &[Vec<usize>]) -> TokenBatch {
    let b = src_rows.len();
    let t_src = src_rows.iter().map(Vec::len).max().unwrap_or(1);
    let t_tgt = prefixes.iter().map(Vec::len).max().unwrap_or(1);
    let mut batch = TokenBatch {
        batch: b,
        t_src,
        t_tgt,
        src: vec![crate::data::PAD; b * t_src],
        src_mask: vec![false; b * t_src],
        tgt_in: vec![crate::data::PAD; b * t_tgt],
        tgt_in_mask: vec![false; b * t_tgt],
        tgt_out: vec![crate::data::PAD; b * t_tgt],
        tgt_out_mask: vec![false; b * t_tgt],
    };
    for (r, row) in src_rows.iter().enumerate() {
        for (j, &id) in row.iter().enumerate() {
            batch.src[r * t_src + j] = id;
            batch.src_mask[r * t_src + j] = true;
        }
    }
    for (r, row) in prefixes.iter().enumerate() {
        for (j, &id) in row.iter().enumerate() {
            batch.tgt_in[r * t_tgt + j] = id;
            batch.tgt_in_mask[r * t_tgt + j] = true;
        }
    }
    batch
}

/// Deterministic autoregressive argmax decoding, up to `max_len` generated
/// tokens per row or until every row emits `eos`. Returned rows contain the
/// generated ids (eos included when reached), without the leading bos.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    src_rows: &[Vec<usize>],
    max_len: usize,
    bos: usize,
    eos: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len < 1 {
        return Err(Error::contract("greedy_decode needs max_len >= 1"));
    }
    if src_rows.is_empty() {
        return Ok(Vec::new());
    }
    let v = model.plan.config.n_vocab;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![bos]; src_rows.len()];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); src_rows.len()];
    let mut done = vec![false; src_rows.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..max_len {
        let batch = inference_batch(src_rows, &prefixes);
        let mut g = Graph::new();
        let ids = model.register_frozen(&mut g);
        let logits = forward(&mut g, &model.plan, &ids, &batch, Mode::Eval, &mut rng)?;
        let data = g.value(logits).data();
        for (r, prefix) in prefixes.iter_mut().enumerate() {
            if done[r] {
                continue;
            }
            let pos = prefix.len() - 1;
            let row = &data[(r * batch.t_tgt + pos) * v..(r * batch.t_tgt + pos + 1) * v];
            let mut best = 0usize;
            for (i, &val) in row.iter().enumerate() {
                if val > row[best] {
                    best = i;
                }
            }
            out[r].push(best);
            if best == eos {
                done[r] = true;
            } else {
                prefix.push(best);
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}
