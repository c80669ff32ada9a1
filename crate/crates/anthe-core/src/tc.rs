//! Tensor Chain (TC) factorized linear layers.
//!
//! A TC layer replaces a dense `N_a x N_c` matrix by a chain of `n` small
//! factors joined through a shared bond dimension `b`: order-3 tensors
//! `[a_1, b, c_1]` and `[a_n, b, c_n]` at the ends, order-4 tensors
//! `[a_i, b, b, c_i]` in between, where `prod(a) = N_a` and `prod(c) = N_c`.
//! This module plans factor shapes for a requested parameter-reduction
//! factor, runs the implicit forward contraction (the full matrix is never
//! formed), materializes the matrix when it is wanted explicitly, and
//! decomposes an existing matrix into a chain by a sequential SVD sweep.

use nalgebra::DMatrix;
use rand::Rng;

use crate::array::{matmul_acc, permute, Array};
use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::scalar::Scalar;

/// Shape plan for one TC layer: factorizations of both matrix dimensions
/// plus the solved bond dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct TcShapePlan {
    /// Row-dimension factors, ascending; their product is `N_a`.
    pub a: Vec<usize>,
    /// Column-dimension factors, ascending; their product is `N_c`.
    pub c: Vec<usize>,
    /// Shared bond dimension, >= 1.
    pub bond: usize,
    /// Requested parameter-reduction factor.
    pub r_target: f64,
    /// Achieved ratio `param_count / (N_a * N_c)`. Exceeds `r_target` only
    /// when even bond 1 cannot fit the budget.
    pub r_actual: f64,
}

impl TcShapePlan {
    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn n_a(&self) -> usize {
        self.a.iter().product()
    }

    pub fn n_c(&self) -> usize {
        self.c.iter().product()
    }

    /// Exact learnable-scalar count:
    /// `b*(a_1*c_1 + a_n*c_n) + b^2 * sum_{1<i<n} a_i*c_i`.
    pub fn param_count(&self) -> usize {
        param_count_for_bond(&self.a, &self.c, self.bond)
    }

    /// Tensor shape of each factor, end factors order-3, interior order-4.
    pub fn factor_shapes(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let b = self.bond;
        (0..n)
            .map(|i| {
                if i == 0 {
                    vec![self.a[0], b, self.c[0]]
                } else if i == n - 1 {
                    vec![self.a[n - 1], b, self.c[n - 1]]
                } else {
                    vec![self.a[i], b, b, self.c[i]]
                }
            })
            .collect()
    }
}

fn param_count_for_bond(a: &[usize], c: &[usize], bond: usize) -> usize {
    let n = a.len();
    let ends = a[0] * c[0] + a[n - 1] * c[n - 1];
    let interior: usize = (1..n - 1).map(|i| a[i] * c[i]).sum();
    bond * ends + bond * bond * interior
}

/// Splits `n` into `k` integer factors with product `n`, as close to the
/// k-th root as possible: among all non-decreasing factorizations, the one
/// minimizing the max/min ratio (ties broken lexicographically).
pub fn balanced_factors(n: usize, k: usize) -> Vec<usize> {
    fn enumerate(n: usize, k: usize, min_d: usize, prefix: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
        if k == 1 {
            if n >= min_d {
                prefix.push(n);
                let ratio = |f: &[usize]| f[f.len() - 1] as f64 / f[0] as f64;
                let better = match best {
                    None => true,
                    Some(b) => {
                        let (rn, rb) = (ratio(prefix), ratio(b));
                        rn < rb || (rn == rb && prefix.as_slice() < b.as_slice())
                    }
                };
                if better {
                    *best = Some(prefix.clone());
                }
                prefix.pop();
            }
            return;
        }
        // The smallest factor of a non-decreasing k-tuple satisfies d^k <= n.
        let mut d = min_d;
        while d.pow(k as u32) <= n {
            if n % d == 0 {
                prefix.push(d);
                enumerate(n / d, k - 1, d, prefix, best);
                prefix.pop();
            }
            d += 1;
        }
    }
    let mut best = None;
    enumerate(n, k, 1, &mut Vec::new(), &mut best);
    best.expect("every n >= 1 factors as (1, .., 1, n)")
}

/// Plans factor shapes and the bond dimension for a TC layer of a dense
/// `n_a x n_c` matrix with chain length `n` and reduction factor `r`.
///
/// The bond is the largest integer `b >= 1` whose parameter count stays
/// within `r * n_a * n_c`; when even `b = 1` overshoots, the plan keeps
/// `b = 1` and reports the overrun through `r_actual`.
pub fn plan_factors(n_a: usize, n_c: usize, n: usize, r: f64) -> Result<TcShapePlan> {
    if n_a < 2 || n_c < 2 {
        return Err(Error::dimension(format!(
            "TC layer needs both dimensions >= 2, got {n_a} x {n_c}"
        )));
    }
    if n < 2 {
        return Err(Error::contract(format!("chain length must be >= 2, got {n}")));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::contract(format!(
            "reduction factor must be in (0, 1], got {r}"
        )));
    }
    let a = balanced_factors(n_a, n);
    let c = balanced_factors(n_c, n);
    let budget = r * (n_a as f64) * (n_c as f64);
    let mut bond = 1usize;
    while param_count_for_bond(&a, &c, bond + 1) as f64 <= budget {
        bond += 1;
    }
    let r_actual = param_count_for_bond(&a, &c, bond) as f64 / ((n_a as f64) * (n_c as f64));
    Ok(TcShapePlan {
        a,
        c,
        bond,
        r_target: r,
        r_actual,
    })
}

/// A TC layer with owned factor values.
#[derive(Clone, Debug)]
pub struct TcLinear<T> {
    pub plan: TcShapePlan,
    pub factors: Vec<Array<T>>,
}

impl<T: Scalar> TcLinear<T> {
    /// Glorot-uniform initialization, treating each factor as the matrix it
    /// acts as during the forward sweep: `[a_i * b_in, b_out * c_i]`.
    pub fn init<R: Rng>(plan: TcShapePlan, rng: &mut R) -> Self {
        let n = plan.n();
        let b = plan.bond;
        let factors = plan
            .factor_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let b_in = if i == 0 { 1 } else { b };
                let b_out = if i == n - 1 { 1 } else { b };
                let fan_in = plan.a[i] * b_in;
                let fan_out = b_out * plan.c[i];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let numel: usize = shape.iter().product();
                let data: Vec<T> = (0..numel)
                    .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                    .collect();
                Array::new(shape, data).expect("factor shape matches element count")
            })
            .collect();
        TcLinear { plan, factors }
    }

    pub fn from_factors(plan: TcShapePlan, factors: Vec<Array<T>>) -> Result<Self> {
        let shapes = plan.factor_shapes();
        if factors.len() != shapes.len() {
            return Err(Error::contract(format!(
                "expected {} factors, got {}",
                shapes.len(),
                factors.len()
            )));
        }
        for (f, s) in factors.iter().zip(&shapes) {
            if f.shape() != s.as_slice() {
                return Err(Error::dimension(format!(
                    "factor shape {:?} does not match plan shape {:?}",
                    f.shape(),
                    s
                )));
            }
        }
        Ok(TcLinear { plan, factors })
    }

    /// Contracts the chain into the explicit `[N_a, N_c]` matrix, row index
    /// grouped as `(a_1..a_n)` and column index as `(c_1..c_n)`, row-major.
    pub fn materialize(&self) -> Result<Array<T>> {
        let n = self.plan.n();
        let b = self.plan.bond;
        // Running tensor [a_1..a_i, c_1..c_i, b_i], flattened for matmul.
        let mut m = permute(&self.factors[0], &[0, 2, 1])?;
        let mut a_done = vec![self.plan.a[0]];
        let mut c_done = vec![self.plan.c[0]];
        for i in 1..n {
            let (ai, ci) = (self.plan.a[i], self.plan.c[i]);
            let b_out = if i == n - 1 { 1 } else { b };
            // Factor as [b_in, a_i, c_i, b_out]; the order-3 end factor
            // gains a free size-1 bond axis first.
            let f = self.factors[i]
                .clone()
                .reshaped(vec![ai, b, b_out, ci])?;
            let f = permute(&f, &[1, 0, 3, 2])?;
            let p: usize = a_done.iter().chain(c_done.iter()).product();
            let mut out = vec![T::zero(); p * ai * ci * b_out];
            matmul_acc(m.data(), f.data(), &mut out, p, b, ai * ci * b_out);
            // [a_1..a_{i-1}, c_1..c_{i-1}, a_i, c_i, b_out]
            let mut shape: Vec<usize> = a_done.clone();
            shape.extend(&c_done);
            shape.extend([ai, ci, b_out]);
            let t = Array::new(shape, out)?;
            // -> [a_1..a_i, c_1..c_i, b_out]
            let k = a_done.len();
            let mut axes: Vec<usize> = (0..k).collect();
            axes.push(2 * k);
            axes.extend(k..2 * k);
            axes.extend([2 * k + 1, 2 * k + 2]);
            m = permute(&t, &axes)?;
            a_done.push(ai);
            c_done.push(ci);
        }
        m.reshaped(vec![self.plan.n_a(), self.plan.n_c()])
    }
}

/// Implicit TC matrix-vector product on the tape: `x [.., N_a] -> [.., N_c]`
/// by a left-to-right sweep over the factors. Peak memory stays
/// `O(batch * b * remaining dims)`; the dense matrix is never built.
pub fn tc_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    factors: &[TensorId],
    plan: &TcShapePlan,
) -> Result<TensorId> {
    let n = plan.n();
    if factors.len() != n {
        return Err(Error::contract(format!(
            "expected {} factors, got {}",
            n,
            factors.len()
        )));
    }
    let xs = g.value(x).shape().to_vec();
    let n_a = plan.n_a();
    if xs.last() != Some(&n_a) {
        return Err(Error::dimension(format!(
            "tc_forward input last axis must be {}, got shape {:?}",
            n_a, xs
        )));
    }
    let batch_shape = &xs[..xs.len() - 1];
    let bsz: usize = batch_shape.iter().product();
    let b = plan.bond;
    let (a, c) = (&plan.a, &plan.c);

    // [B, a_1, .., a_n]
    let mut shape = vec![bsz];
    shape.extend(a.iter());
    let mut s = g.reshape(x, shape)?;
    // -> [B, a_2.., a_1] so the first contraction index group is last.
    let mut axes = vec![0usize];
    axes.extend(2..=n);
    axes.push(1);
    s = g.permute(s, axes)?;
    let tail: usize = a[1..].iter().product();
    s = g.reshape(s, vec![bsz * tail, a[0]])?;
    let w0 = g.reshape(factors[0], vec![a[0], b * c[0]])?;
    s = g.matmul(s, w0)?;
    let mut shape = vec![bsz];
    shape.extend(&a[1..]);
    shape.extend([b, c[0]]);
    s = g.reshape(s, shape)?;

    for i in 1..n {
        // State: [B, a_{i+1}.., c_1..c_{i-1}, b, c_i-1] — axis bookkeeping:
        // positions 1..=n-i hold a's, then i-1 c's, then the bond, then the
        // newest c. Bring (a_i, b) to the back, everything else in order.
        let b_out = if i == n - 1 { 1 } else { b };
        let mut axes = vec![0usize];
        axes.extend(2..=n - i);
        axes.extend(n - i + 1..=n - 1);
        axes.push(n + 1);
        axes.push(1);
        axes.push(n);
        s = g.permute(s, axes)?;
        let prefix: usize =
            bsz * a[i + 1..].iter().product::<usize>() * c[..i].iter().product::<usize>();
        s = g.reshape(s, vec![prefix, a[i] * b])?;
        let wi = g.reshape(factors[i], vec![a[i] * b, b_out * c[i]])?;
        s = g.matmul(s, wi)?;
        let mut shape = vec![bsz];
        shape.extend(&a[i + 1..]);
        shape.extend(&c[..i]);
        shape.extend([b_out, c[i]]);
        s = g.reshape(s, shape)?;
    }

    // [B, c_1..c_{n-1}, 1, c_n] is already row-major [.., N_c].
    let mut out_shape = batch_shape.to_vec();
    out_shape.push(plan.n_c());
    g.reshape(s, out_shape)
}

/// How [`decompose`] chooses its truncation rank.
pub enum DecomposeTarget<'a> {
    /// Truncate every SVD split to the plan's bond.
    Plan(&'a TcShapePlan),
    /// Chain length `n`, keeping enough singular values per split that the
    /// discarded relative Frobenius mass stays below `tol` (`tol = 0` keeps
    /// everything, which reproduces the matrix exactly at full rank).
    Tolerance { n: usize, tol: f64 },
}

/// Result of an SVD decomposition sweep.
pub struct TcDecomposition<T> {
    pub layer: TcLinear<T>,
    /// `|materialize(layer) - W|_F / |W|_F`.
    pub rel_error: f64,
}

/// Decomposes a dense matrix into a TC layer by a sequential SVD sweep
/// (TT-SVD): the matrix is reshaped into the interleaved multi-index tensor
/// `[a_1, c_1, .., a_n, c_n]`, then factors are split off left to right,
/// truncating singular values per the target. Ranks are zero-padded up to
/// one uniform bond so the result satisfies the TC shape invariants.
pub fn decompose<T: Scalar>(w: &Array<T>, target: DecomposeTarget) -> Result<TcDecomposition<T>> {
    let shape = w.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dimension(format!(
            "decompose expects a matrix, got shape {:?}",
            shape
        )));
    }
    if w.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::data("decompose input has non-finite entries"));
    }
    let (n_a, n_c) = (shape[0], shape[1]);
    let (a, c, cap, r_target) = match target {
        DecomposeTarget::Plan(p) => {
            if p.n_a() != n_a || p.n_c() != n_c {
                return Err(Error::dimension(format!(
                    "plan is for {}x{}, matrix is {}x{}",
                    p.n_a(),
                    p.n_c(),
                    n_a,
                    n_c
                )));
            }
            (p.a.clone(), p.c.clone(), Some(p.bond), p.r_target)
        }
        DecomposeTarget::Tolerance { n, tol } => {
            if n < 2 {
                return Err(Error::contract(format!(
                    "chain length must be >= 2, got {n}"
                )));
            }
            if !(0.0..1.0).contains(&tol) {
                return Err(Error::contract(format!(
                    "tolerance must be in [0, 1), got {tol}"
                )));
            }
            (balanced_factors(n_a, n), balanced_factors(n_c, n), None, 1.0)
        }
    };
    let n = a.len();
    let tol = match target {
        DecomposeTarget::Tolerance { tol, .. } => tol,
        DecomposeTarget::Plan(_) => 0.0,
    };

    // W -> [a_1..a_n, c_1..c_n] -> interleaved [a_1, c_1, .., a_n, c_n].
    let w64: Array<f64> = w.cast();
    let mut full_shape = a.clone();
    full_shape.extend(&c);
    let t = w64.reshaped(full_shape)?;
    let axes: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    let t = permute(&t, &axes)?;

    // TT-SVD sweep over modes m_i = a_i * c_i.
    let modes: Vec<usize> = (0..n).map(|i| a[i] * c[i]).collect();
    let mut carry = t.into_data();
    let mut carry_rows = modes[0];
    let mut cols: usize = modes[1..].iter().product();
    let mut cores: Vec<Array<f64>> = Vec::with_capacity(n);
    let mut ranks: Vec<usize> = Vec::with_capacity(n - 1);
    let mut r_prev = 1usize;
    for i in 0..n - 1 {
        let mat = DMatrix::from_row_slice(carry_rows, cols, &carry);
        let svd = mat.svd(true, true);
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let sv = &svd.singular_values;
        let p = sv.len();
        let mut keep = match cap {
            Some(b) => b.min(p),
            None => p,
        };
        if tol > 0.0 {
            let total: f64 = sv.iter().map(|s| s * s).sum();
            let mut tail = 0.0;
            let mut k = p;
            for j in (0..p).rev() {
                let cand = tail + sv[j] * sv[j];
                if cand.sqrt() <= tol * total.sqrt() {
                    tail = cand;
                    k = j;
                } else {
                    break;
                }
            }
            keep = keep.min(k);
        }
        let keep = keep.max(1);
        ranks.push(keep);

        // Core_i = U[:, :keep] as [r_prev, m_i, keep].
        let mut core = vec![0.0f64; carry_rows * keep];
        for r in 0..carry_rows {
            for k in 0..keep {
                core[r * keep + k] = u[(r, k)];
            }
        }
        cores.push(Array::new(vec![r_prev, modes[i], keep], core)?);

        // Carry = diag(S) * V^T, truncated.
        let mut next = vec![0.0f64; keep * cols];
        for k in 0..keep {
            for j in 0..cols {
                next[k * cols + j] = sv[k] * vt[(k, j)];
            }
        }
        // The next mode joins the row side: [keep, m_{i+1} * rest] is read
        // as [keep * m_{i+1}, rest].
        r_prev = keep;
        carry = next;
        carry_rows = keep * modes[i + 1];
        cols = carry.len() / carry_rows;
    }
    cores.push(Array::new(vec![r_prev, modes[n - 1], 1], carry)?);

    // Zero-pad every bond to the uniform value and re-layout the cores as
    // chain factors.
    let bond = match cap {
        Some(b) => b,
        None => ranks.iter().copied().max().unwrap_or(1),
    };
    let mut factors64: Vec<Array<f64>> = Vec::with_capacity(n);
    for (i, core) in cores.iter().enumerate() {
        let (rin, m, rout) = (core.shape()[0], core.shape()[1], core.shape()[2]);
        let (bin, bout) = (
            if i == 0 { 1 } else { bond },
            if i == n - 1 { 1 } else { bond },
        );
        let mut padded = vec![0.0f64; bin * m * bout];
        for ri in 0..rin {
            for mi in 0..m {
                for ro in 0..rout {
                    padded[(ri * m + mi) * bout + ro] = core.data()[(ri * m + mi) * rout + ro];
                }
            }
        }
        // [b_in, a_i, c_i, b_out] -> factor layout.
        let t = Array::new(vec![bin, a[i], c[i], bout], padded)?;
        let f = if i == 0 {
            // [1, a, c, b] -> [a, b, c]
            permute(&t, &[0, 1, 3, 2])?.reshaped(vec![a[i], bond, c[i]])?
        } else if i == n - 1 {
            // [b, a, c, 1] -> [a, b, c]
            permute(&t, &[1, 0, 2, 3])?.reshaped(vec![a[i], bond, c[i]])?
        } else {
            permute(&t, &[1, 0, 3, 2])? // [a, b_in, b_out, c]
        };
        factors64.push(f);
    }

    let plan = TcShapePlan {
        a: a.clone(),
        c: c.clone(),
        bond,
        r_target,
        r_actual: param_count_for_bond(&a, &c, bond) as f64 / ((n_a * n_c) as f64),
    };
    let layer64 = TcLinear {
        plan: plan.clone(),
        factors: factors64,
    };
    let recon = layer64.materialize()?;
    let mut num = 0.0;
    for (x, y) in recon.data().iter().zip(w.data()) {
        let d = x - y.into_f64();
        num += d * d;
    }
    let denom = w.norm();
    let rel_error = if denom == 0.0 {
        num.sqrt()
    } else {
        num.sqrt() / denom
    };

    let factors = layer64.factors.iter().map(|f| f.cast::<T>()).collect();
    Ok(TcDecomposition {
        layer: TcLinear { plan, factors },
        rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(n_a: usize, n_c: usize, n: usize, r: f64, seed: u64) -> TcLinear<f64> {
        let plan = plan_factors(n_a, n_c, n, r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TcLinear::init(plan, &mut rng)
    }

    /// Direct einsum over every (a, c, bond) multi-index; the slow oracle.
    fn naive_materialize(layer: &TcLinear<f64>) -> Array<f64> {
        let plan = &layer.plan;
        let n = plan.n();
        let (n_a, n_c, b) = (plan.n_a(), plan.n_c(), plan.bond);
        let mut w = vec![0.0f64; n_a * n_c];
        let mut a_idx = vec![0usize; n];
        for row in 0..n_a {
            let mut rem = row;
            for i in (0..n).rev() {
                a_idx[i] = rem % plan.a[i];
                rem /= plan.a[i];
            }
            let mut c_idx = vec![0usize; n];
            for col in 0..n_c {
                let mut rem = col;
                for i in (0..n).rev() {
                    c_idx[i] = rem % plan.c[i];
                    rem /= plan.c[i];
                }
                let mut bonds = vec![0usize; n - 1];
                let mut total = 0.0;
                loop {
                    let mut prod = 1.0;
                    for i in 0..n {
                        let f = &layer.factors[i];
                        let v = if i == 0 {
                            f.data()[(a_idx[0] * b + bonds[0]) * plan.c[0] + c_idx[0]]
                        } else if i == n - 1 {
                            f.data()[(a_idx[i] * b + bonds[i - 1]) * plan.c[i] + c_idx[i]]
                        } else {
                            f.data()[((a_idx[i] * b + bonds[i - 1]) * b + bonds[i]) * plan.c[i]
                                + c_idx[i]]
                        };
                        prod *= v;
                    }
                    total += prod;
                    // Odometer over the bond indices.
                    let mut d = n - 1;
                    loop {
                        if d == 0 {
                            break;
                        }
                        d -= 1;
                        bonds[d] += 1;
                        if bonds[d] < b {
                            break;
                        }
                        bonds[d] = 0;
                        if d == 0 {
                            d = usize::MAX;
                            break;
                        }
                    }
                    if d == usize::MAX {
                        break;
                    }
                }
                w[row * n_c + col] = total;
            }
        }
        Array::new(vec![n_a, n_c], w).unwrap()
    }

    #[test]
    fn plan_example_two_factor() {
        let p = plan_factors(512, 2048, 2, 0.1).unwrap();
        assert_eq!(p.a, vec![16, 32]);
        assert_eq!(p.c, vec![32, 64]);
        assert_eq!(p.bond, 40);
        assert_eq!(p.param_count(), 102_400);
        assert!((p.r_actual - 0.09765625).abs() < 1e-12);
    }

    #[test]
    fn plan_full_budget_recovers_dense_count() {
        let p = plan_factors(4, 4, 2, 1.0).unwrap();
        assert_eq!(p.a, vec![2, 2]);
        assert_eq!(p.c, vec![2, 2]);
        assert_eq!(p.bond, 2);
        assert_eq!(p.param_count(), 16);
    }

    #[test]
    fn plan_example_three_factor() {
        let p = plan_factors(512, 2048, 3, 0.1).unwrap();
        assert_eq!(p.a, vec![8, 8, 8]);
        assert_eq!(p.c, vec![8, 16, 16]);
        assert_eq!(p.bond, 27);
        assert_eq!(p.param_count(), 98_496);
    }

    #[test]
    fn plan_surfaces_overrun_when_bond_one_exceeds_budget() {
        let p = plan_factors(512, 1365, 2, 0.0005).unwrap();
        assert_eq!(p.bond, 1);
        assert_eq!(p.param_count(), 1808); // 16*35 + 32*39
        assert!(p.r_actual > p.r_target);
    }

    #[test]
    fn plan_rejects_degenerate_inputs() {
        assert!(plan_factors(1, 8, 2, 0.5).is_err());
        assert!(plan_factors(8, 1, 2, 0.5).is_err());
        assert!(plan_factors(8, 8, 1, 0.5).is_err());
        assert!(plan_factors(8, 8, 2, 0.0).is_err());
        assert!(plan_factors(8, 8, 2, 1.5).is_err());
    }

    #[test]
    fn plan_is_deterministic() {
        let p1 = plan_factors(512, 32000, 2, 0.2).unwrap();
        let p2 = plan_factors(512, 32000, 2, 0.2).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.a, vec![16, 32]);
        assert_eq!(p1.c, vec![160, 200]);
    }

    #[test]
    fn balanced_factorizations() {
        assert_eq!(balanced_factors(512, 2), vec![16, 32]);
        assert_eq!(balanced_factors(512, 3), vec![8, 8, 8]);
        assert_eq!(balanced_factors(512, 4), vec![4, 4, 4, 8]);
        assert_eq!(balanced_factors(2048, 2), vec![32, 64]);
        assert_eq!(balanced_factors(32000, 2), vec![160, 200]);
        assert_eq!(balanced_factors(1365, 2), vec![35, 39]);
        assert_eq!(balanced_factors(1365, 3), vec![7, 13, 15]);
        assert_eq!(balanced_factors(1365, 4), vec![3, 5, 7, 13]);
        assert_eq!(balanced_factors(64, 2), vec![8, 8]);
        assert_eq!(balanced_factors(7, 2), vec![1, 7]);
    }

    #[test]
    fn param_count_examples() {
        let p = TcShapePlan {
            a: vec![16, 32],
            c: vec![32, 64],
            bond: 40,
            r_target: 0.1,
            r_actual: 0.0,
        };
        assert_eq!(p.param_count(), 102_400);
        let p = TcShapePlan {
            a: vec![2, 2],
            c: vec![2, 2],
            bond: 1,
            r_target: 1.0,
            r_actual: 0.0,
        };
        assert_eq!(p.param_count(), 8);
        let p = TcShapePlan {
            a: vec![8, 8, 8],
            c: vec![8, 16, 16],
            bond: 27,
            r_target: 0.1,
            r_actual: 0.0,
        };
        assert_eq!(p.param_count(), 27 * (64 + 128) + 27 * 27 * 128);
        assert_eq!(p.param_count(), 98_496);
    }

    #[test]
    fn materialize_bond_one_is_outer_product() {
        // w1 [2,1,3] = u, w2 [2,1,2] = v: W[(a1 a2),(c1 c2)] = u[a1,c1] v[a2,c2].
        let u: [f64; 6] = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        let v: [f64; 4] = [1.0, 2.0, -1.0, 3.0];
        let plan = TcShapePlan {
            a: vec![2, 2],
            c: vec![3, 2],
            bond: 1,
            r_target: 1.0,
            r_actual: 0.0,
        };
        let layer = TcLinear::from_factors(
            plan,
            vec![
                Array::new(vec![2, 1, 3], u.to_vec()).unwrap(),
                Array::new(vec![2, 1, 2], v.to_vec()).unwrap(),
            ],
        )
        .unwrap();
        let w = layer.materialize().unwrap();
        assert_eq!(w.shape(), &[4, 6]);
        for a1 in 0..2 {
            for a2 in 0..2 {
                for c1 in 0..3 {
                    for c2 in 0..2 {
                        let got = w.data()[(a1 * 2 + a2) * 6 + c1 * 2 + c2];
                        let want = u[a1 * 3 + c1] * v[a2 * 2 + c2];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn materialize_matches_naive_einsum() {
        for (n, seed) in [(2usize, 11u64), (3, 12), (4, 13)] {
            let layer = random_layer(16, 24, n, 1.0, seed);
            let fast = layer.materialize().unwrap();
            let slow = naive_materialize(&layer);
            let mut worst = 0.0f64;
            for (x, y) in fast.data().iter().zip(slow.data()) {
                worst = worst.max((x - y).abs());
            }
            assert!(worst < 1e-10, "n={n}: worst |delta| = {worst}");
        }
    }

    #[test]
    fn forward_of_zero_factors_is_zero() {
        let plan = plan_factors(8, 6, 2, 1.0).unwrap();
        let factors: Vec<Array<f64>> = plan
            .factor_shapes()
            .into_iter()
            .map(|s| Array::zeros(&s))
            .collect();
        let mut g = Graph::new();
        let ids: Vec<TensorId> = factors.iter().map(|f| g.input(f.clone())).collect();
        let x = g.input(Array::full(&[3, 8], 1.0));
        let y = tc_forward(&mut g, x, &ids, &plan).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_basis_vector_reads_one_row() {
        let layer = random_layer(4, 4, 2, 1.0, 21);
        let w = layer.materialize().unwrap();
        let mut g = Graph::new();
        let ids: Vec<TensorId> = layer.factors.iter().map(|f| g.input(f.clone())).collect();
        let mut e1 = vec![0.0f64; 4];
        e1[0] = 1.0;
        let x = g.input(Array::new(vec![1, 4], e1).unwrap());
        let y = tc_forward(&mut g, x, &ids, &layer.plan).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&w.data()[..4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_materialized_product_f64() {
        for (n, seed) in [(2usize, 31u64), (3, 32), (4, 33)] {
            let layer = random_layer(24, 16, n, 0.8, seed);
            let w = layer.materialize().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let xv: Vec<f64> = (0..2 * 3 * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Array::new(vec![2, 3, 24], xv).unwrap();

            let mut g = Graph::new();
            let ids: Vec<TensorId> = layer.factors.iter().map(|f| g.input(f.clone())).collect();
            let xi = g.input(x.clone());
            let y = tc_forward(&mut g, xi, &ids, &layer.plan).unwrap();

            let wi = g.input(w);
            let want = g.matmul(xi, wi).unwrap();
            let mut worst = 0.0f64;
            for (a, b) in g.value(y).data().iter().zip(g.value(want).data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-10, "n={n}: worst rel = {worst}");
        }
    }

    #[test]
    fn forward_matches_materialized_product_f32() {
        for (n, seed) in [(2usize, 41u64), (3, 42), (4, 43)] {
            let layer64 = random_layer(24, 16, n, 0.8, seed);
            let layer = TcLinear::<f32> {
                plan: layer64.plan.clone(),
                factors: layer64.factors.iter().map(|f| f.cast()).collect(),
            };
            let w = layer.materialize().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let xv: Vec<f32> = (0..5 * 24).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let x = Array::new(vec![5, 24], xv).unwrap();

            let mut g = Graph::<f32>::new();
            let ids: Vec<TensorId> = layer.factors.iter().map(|f| g.input(f.clone())).collect();
            let xi = g.input(x);
            let y = tc_forward(&mut g, xi, &ids, &layer.plan).unwrap();
            let wi = g.input(w);
            let want = g.matmul(xi, wi).unwrap();
            let mut worst = 0.0f32;
            for (a, b) in g.value(y).data().iter().zip(g.value(want).data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-5, "n={n}: worst rel = {worst}");
        }
    }

    #[test]
    fn forward_rejects_axis_mismatch() {
        let layer = random_layer(8, 6, 2, 1.0, 51);
        let mut g = Graph::new();
        let ids: Vec<TensorId> = layer.factors.iter().map(|f| g.input(f.clone())).collect();
        let x = g.input(Array::<f64>::zeros(&[3, 7]));
        assert!(tc_forward(&mut g, x, &ids, &layer.plan).is_err());
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let plan = plan_factors(6, 4, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let layer = TcLinear::<f64>::init(plan.clone(), &mut rng);
        let mut params: Vec<Array<f64>> = layer.factors.clone();
        let xv: Vec<f64> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        params.push(Array::new(vec![2, 6], xv).unwrap());
        let r = gradcheck(&params, None, 0, |g, p| {
            let y = tc_forward(g, p[3], &p[..3], &plan)?;
            let z = g.gelu(y)?;
            g.sum(z)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn decompose_rank_one_needs_bond_one() {
        // A bond-1 chain materializes to a Kronecker-structured matrix;
        // u = x (x) y and v = s (x) t make W = u v^T exactly that, so the
        // sweep must recover it with bond 1. (A generic outer product is
        // rank 1 as a matrix but not bond 1 in the chain's index pairing:
        // its split rank is rank(u as 2x2) * rank(v as 2x2).)
        let (x, y, s, t) = ([1.0, -2.0], [0.5, 3.0], [2.0, 1.0], [-1.0, 0.25]);
        let mut u = [0.0f64; 4];
        let mut v = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                u[i * 2 + j] = x[i] * y[j];
                v[i * 2 + j] = s[i] * t[j];
            }
        }
        let mut w = vec![0.0f64; 16];
        for i in 0..4 {
            for j in 0..4 {
                w[i * 4 + j] = u[i] * v[j];
            }
        }
        let w = Array::new(vec![4, 4], w).unwrap();
        let d = decompose(&w, DecomposeTarget::Tolerance { n: 2, tol: 1e-12 }).unwrap();
        assert_eq!(d.layer.plan.bond, 1);
        assert!(d.rel_error < 1e-10, "rel error {}", d.rel_error);

        // The generic outer product needs bond 4 — rank(U) * rank(V) = 4.
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0, 0.25];
        let mut w = vec![0.0f64; 16];
        for i in 0..4 {
            for j in 0..4 {
                w[i * 4 + j] = u[i] * v[j];
            }
        }
        let w = Array::new(vec![4, 4], w).unwrap();
        let d = decompose(&w, DecomposeTarget::Tolerance { n: 2, tol: 1e-12 }).unwrap();
        assert_eq!(d.layer.plan.bond, 4);
        assert!(d.rel_error < 1e-10, "rel error {}", d.rel_error);
    }

    #[test]
    fn decompose_full_bond_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let data: Vec<f64> = (0..16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Array::new(vec![16, 16], data).unwrap();
        let d = decompose(&w, DecomposeTarget::Tolerance { n: 2, tol: 0.0 }).unwrap();
        assert!(d.rel_error < 1e-8, "rel error {}", d.rel_error);
        let recon = d.layer.materialize().unwrap();
        let mut num = 0.0;
        for (x, y) in recon.data().iter().zip(w.data()) {
            num += (x - y) * (x - y);
        }
        assert!(num.sqrt() / w.norm() < 1e-8);
    }

    #[test]
    fn decompose_error_is_monotone_in_bond() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Array::new(vec![64, 64], data).unwrap();
        let mut prev = f64::INFINITY;
        for bond in [1usize, 2, 4, 8, 16, 32, 64] {
            let plan = TcShapePlan {
                a: vec![8, 8],
                c: vec![8, 8],
                bond,
                r_target: 1.0,
                r_actual: 0.0,
            };
            let d = decompose(&w, DecomposeTarget::Plan(&plan)).unwrap();
            assert!(
                d.rel_error <= prev + 1e-12,
                "error grew at bond {bond}: {} -> {}",
                prev,
                d.rel_error
            );
            prev = d.rel_error;
        }
        assert!(prev < 1e-8, "full bond should be exact, got {prev}");
    }

    #[test]
    fn decompose_recovers_synthesized_chain() {
        // A matrix born from a bond-b chain must decompose exactly at bond b.
        for n in [2usize, 3] {
            let layer = random_layer(16, 24, n, 0.5, 90 + n as u64);
            let w = layer.materialize().unwrap();
            let d = decompose(&w, DecomposeTarget::Plan(&layer.plan)).unwrap();
            assert!(
                d.rel_error < 1e-8,
                "n={n} bond={}: rel error {}",
                layer.plan.bond,
                d.rel_error
            );
        }
    }

    #[test]
    fn decompose_rejects_non_finite() {
        let mut data = vec![0.0f64; 16];
        data[3] = f64::NAN;
        let w = Array::new(vec![4, 4], data).unwrap();
        assert!(decompose(&w, DecomposeTarget::Tolerance { n: 2, tol: 0.0 }).is_err());
    }
}
