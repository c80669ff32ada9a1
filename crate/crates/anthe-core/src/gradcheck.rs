//! Finite-difference verification of tape gradients.
//!
//! The harness rebuilds the graph from scratch for every probe (the tape is
//! define-by-run), so the supplied closure must be deterministic in its
//! inputs — any randomness inside it has to come from a freshly seeded
//! generator per call.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};

/// Central-difference step. Chosen for f64: large enough to dominate
/// round-off in sums of thousands of terms, small enough that the O(h^2)
/// truncation error stays below the pass thresholds.
pub const FD_STEP: f64 = 1e-5;

/// Floor inside the relative-error denominator, so near-zero gradient pairs
/// compare absolutely rather than blowing up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error across every probed coordinate.
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst probe.
    pub worst: Option<(usize, usize)>,
    /// Number of coordinates probed.
    pub probes: usize,
}

/// Relative error with an absolute floor:
/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the gradients of `build` at `params`.
///
/// `build` receives a fresh graph plus one differentiable leaf per entry of
/// `params` and must return a scalar loss. Every coordinate is probed unless
/// `max_probes_per_param` caps it, in which case that many coordinates are
/// sampled per parameter (seeded, so runs are reproducible).
pub fn gradcheck<F>(
    params: &[Array<f64>],
    max_probes_per_param: Option<usize>,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |arrays: &[Array<f64>]| -> Result<(Graph<f64>, Vec<TensorId>, TensorId)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = arrays.iter().map(|a| g.param(a.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::dimension("gradcheck loss must be a scalar"));
        }
        Ok((g, ids, loss))
    };

    let (mut g, ids, loss) = eval(params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .map(|a| a.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).numel()])
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        probes: 0,
    };
    let mut work: Vec<Array<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = match max_probes_per_param {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        for &ci in &coords {
            let base = param.data()[ci];
            work[pi].data_mut()[ci] = base + FD_STEP;
            let (g_plus, _, l_plus) = eval(&work)?;
            let f_plus = g_plus.scalar_value(l_plus);
            work[pi].data_mut()[ci] = base - FD_STEP;
            let (g_minus, _, l_minus) = eval(&work)?;
            let f_minus = g_minus.scalar_value(l_minus);
            work[pi].data_mut()[ci] = base;

            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            let err = rel_err(analytic[pi][ci], numeric);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// Builds a deterministic array with entries in `(-1, 1)`.
fn suite_filled(shape: &[usize], seed: u64) -> Array<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Array::new(shape.to_vec(), data).expect("shape/data length agree")
}

/// Like [`suite_filled`] but keeps every entry at least 0.1 from zero, for
/// ops with a kink there (relu) that finite differences cannot straddle.
fn suite_filled_away_from_zero(shape: &[usize], seed: u64) -> Array<f64> {
    let mut a = suite_filled(shape, seed);
    for v in a.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    a
}

/// Runs the named finite-difference suites covering every differentiable
/// op, returning `(op name, report)` pairs. Deterministic under `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::attention::{gate_streams, multi_head_attention, AttentionParams, GateKind, Projection};
    use crate::hsoftpos::{self, HSoftPosConfig, HSoftPosParams};
    use crate::tc::{plan_factors, tc_forward, TcLinear};

    // Squared sum turns any tensor into a scalar loss with nontrivial
    // upstream gradients everywhere.
    fn sq_sum(g: &mut Graph<f64>, x: TensorId) -> Result<TensorId> {
        let s = g.mul(x, x)?;
        g.sum(s)
    }

    let mut out: Vec<(&'static str, GradCheckReport)> = Vec::new();
    let mut run = |name: &'static str,
                   params: Vec<Array<f64>>,
                   cap: Option<usize>,
                   build: &dyn Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>|
     -> Result<()> {
        let report = gradcheck(&params, cap, seed, build)?;
        out.push((name, report));
        Ok(())
    };

    run(
        "add",
        vec![suite_filled(&[2, 3], seed ^ 1), suite_filled(&[3], seed ^ 2)],
        None,
        &|g, ids| {
            let x = g.add(ids[0], ids[1])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "mul",
        vec![suite_filled(&[2, 3], seed ^ 3), suite_filled(&[3], seed ^ 4)],
        None,
        &|g, ids| {
            let x = g.mul(ids[0], ids[1])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "matmul",
        vec![
            suite_filled(&[2, 3, 4], seed ^ 5),
            suite_filled(&[4, 2], seed ^ 6),
        ],
        None,
        &|g, ids| {
            let x = g.matmul(ids[0], ids[1])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "scale",
        vec![suite_filled(&[2, 3], seed ^ 7)],
        None,
        &|g, ids| {
            let x = g.scale(ids[0], 1.7)?;
            sq_sum(g, x)
        },
    )?;
    run(
        "sigmoid",
        vec![suite_filled(&[2, 4], seed ^ 8)],
        None,
        &|g, ids| {
            let x = g.sigmoid(ids[0])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "gelu",
        vec![suite_filled_away_from_zero(&[2, 4], seed ^ 9)],
        None,
        &|g, ids| {
            let x = g.gelu(ids[0])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "relu",
        vec![suite_filled_away_from_zero(&[2, 4], seed ^ 10)],
        None,
        &|g, ids| {
            let x = g.relu(ids[0])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "softmax",
        vec![suite_filled(&[2, 5], seed ^ 11)],
        None,
        &|g, ids| {
            let p = g.softmax(ids[0])?;
            let w = g.input(suite_filled(&[2, 5], 999));
            let x = g.mul(p, w)?;
            g.sum(x)
        },
    )?;
    run(
        "layer_norm",
        vec![
            suite_filled(&[2, 6], seed ^ 12),
            suite_filled_away_from_zero(&[6], seed ^ 13),
            suite_filled(&[6], seed ^ 14),
        ],
        None,
        &|g, ids| {
            let x = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            sq_sum(g, x)
        },
    )?;
    run(
        "sum",
        vec![suite_filled(&[3, 3], seed ^ 15)],
        None,
        &|g, ids| sq_sum(g, ids[0]),
    )?;
    run(
        "concat",
        vec![
            suite_filled(&[2, 2], seed ^ 16),
            suite_filled(&[2, 3], seed ^ 17),
        ],
        None,
        &|g, ids| {
            let x = g.concat(&[ids[0], ids[1]], 1)?;
            sq_sum(g, x)
        },
    )?;
    run(
        "slice",
        vec![suite_filled(&[2, 5], seed ^ 18)],
        None,
        &|g, ids| {
            let x = g.slice(ids[0], 1, 1, 3)?;
            sq_sum(g, x)
        },
    )?;
    run(
        "reshape",
        vec![suite_filled(&[2, 6], seed ^ 19)],
        None,
        &|g, ids| {
            let x = g.reshape(ids[0], vec![3, 4])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "permute",
        vec![suite_filled(&[2, 3, 4], seed ^ 20)],
        None,
        &|g, ids| {
            let x = g.permute(ids[0], vec![2, 0, 1])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "gather",
        vec![suite_filled(&[5, 3], seed ^ 21)],
        None,
        &|g, ids| {
            let x = g.gather(ids[0], &[0, 2, 2, 4], &[2, 2])?;
            sq_sum(g, x)
        },
    )?;
    run(
        "causal_conv1d",
        vec![
            suite_filled(&[1, 5, 2], seed ^ 22),
            suite_filled(&[3, 2, 3], seed ^ 23),
        ],
        None,
        &|g, ids| {
            let x = g.causal_conv1d(ids[0], ids[1], 2)?;
            sq_sum(g, x)
        },
    )?;
    run(
        "cross_entropy",
        vec![suite_filled(&[2, 3, 4], seed ^ 24)],
        None,
        &|g, ids| g.cross_entropy(ids[0], &[1, 0, 3, 2, 1, 0], &[true, true, false, true, true, false]),
    )?;
    run(
        "dropout",
        vec![suite_filled(&[3, 4], seed ^ 25)],
        None,
        &|g, ids| {
            // A freshly seeded generator keeps the mask identical across
            // finite-difference probes.
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let x = g.dropout(ids[0], 0.4, &mut rng)?;
            sq_sum(g, x)
        },
    )?;
    {
        let plan = plan_factors(6, 6, 2, 1.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 26);
        let layer = TcLinear::<f64>::init(plan.clone(), &mut rng);
        let plan_ref = plan.clone();
        run(
            "tc_forward",
            layer.factors.to_vec(),
            None,
            &move |g, ids| {
                let x = g.input(suite_filled(&[2, 6], 1001));
                let y = tc_forward(g, x, ids, &plan_ref)?;
                sq_sum(g, y)
            },
        )?;
    }
    {
        let d = 6;
        let params = vec![
            suite_filled(&[d, d], seed ^ 27),
            suite_filled(&[d], seed ^ 28),
            suite_filled(&[d, d], seed ^ 29),
            suite_filled(&[d], seed ^ 30),
            suite_filled(&[d, d], seed ^ 31),
            suite_filled(&[d], seed ^ 32),
            suite_filled(&[d, d], seed ^ 33),
            suite_filled(&[d], seed ^ 34),
        ];
        run(
            "attention_gates",
            params,
            Some(12),
            &move |g, ids| {
                let p = AttentionParams {
                    w_q: Projection::Dense { w: ids[0], b: Some(ids[1]) },
                    w_k: Projection::Dense { w: ids[2], b: Some(ids[3]) },
                    w_v: Projection::Dense { w: ids[4], b: Some(ids[5]) },
                    w_o: Projection::Dense { w: ids[6], b: Some(ids[7]) },
                    gate: GateKind::KgV,
                    d_h: 2,
                    patt_enabled: true,
                };
                let x = g.input(suite_filled(&[2, 3, d], 1002));
                let (q, k, v) = gate_streams(g, &p, x, x, x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let y = multi_head_attention(g, &p, q, k, v, None, 0.0, &mut rng)?;
                sq_sum(g, y)
            },
        )?;
    }
    {
        let cfg = HSoftPosConfig::new(8, 6, 2, 2)?;
        let params: Vec<Array<f64>> = hsoftpos::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 35));
        let cfg_ref = cfg;
        run(
            "hsoftpos",
            params,
            Some(12),
            &move |g, ids| {
                let p = HSoftPosParams::from_ids(&cfg_ref, ids)?;
                let x = hsoftpos::embed(g, &cfg_ref, &p, &[1, 4, 5, 2, 1, 3, 4, 2], 2, 4)?;
                sq_sum(g, x)
            },
        )?;
    }
    Ok(out)
}

/// End-to-end finite-difference check of a small full model (64-bit,
/// training mode with a fixed dropout stream). Returns the worst report.
pub fn model_suite(seed: u64, probes_per_tensor: usize) -> Result<GradCheckReport> {
    use crate::config::preset;
    use crate::data::TokenBatch;
    use crate::model::{loss, Mode, Model, ModelPlan};

    let mut cfg = preset("anthe-small")?;
    cfg.n_vocab = 50;
    let model: Model<f64> = Model::build(cfg.clone(), seed)?;
    let plan = ModelPlan::new(cfg)?;
    let src = vec![vec![1, 10, 11, 12, 2], vec![1, 13, 14, 2]];
    let tgt = vec![vec![1, 15, 16, 2], vec![1, 17, 18, 19, 2]];
    let batch = TokenBatch::from_rows(&src, &tgt)?;
    gradcheck(
        &model.params,
        Some(probes_per_tensor),
        seed,
        move |g, ids| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let (l, _) = loss(g, &plan, ids, &batch, Mode::Train, &mut rng)?;
            Ok(l)
        },
    )
}
