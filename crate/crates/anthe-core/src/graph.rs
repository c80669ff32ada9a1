//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Op builders
//! append nodes and return [`TensorId`] handles; values are computed eagerly
//! (define-by-run), so a builder can fail fast with a shape error. A call to
//! [`Graph::backward`] walks the tape in reverse construction order and adds
//! the resulting gradients into persistent per-node slots, so repeated
//! backward calls accumulate until [`Graph::zero_grads`].

use rand::Rng;

use crate::array::{
    broadcast_index, broadcast_shapes, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, pad_shape,
    permute as permute_array, Array,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Sigmoid(TensorId),
    Gelu(TensorId),
    Relu(TensorId),
    Softmax(TensorId),
    CausalConv1d {
        x: TensorId,
        w: TensorId,
        dilation: usize,
    },
    Reshape(TensorId),
    Permute {
        x: TensorId,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Dropout {
        x: TensorId,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
    Gather {
        table: TensorId,
        indices: Vec<usize>,
    },
    Sum(TensorId),
    Scale(TensorId, T),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Arena-allocated autodiff tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a non-differentiable leaf (an input or constant).
    pub fn input(&mut self, value: Array<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    /// First element of a tensor; convenient for scalar losses.
    pub fn scalar_value(&self, id: TensorId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&Array<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- op builders -----------------------------------------------------

    /// Batched matrix multiply. The last two axes contract as
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`; leading axes broadcast.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dimension(format!(
                "matmul needs >= 2 axes per operand, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dimension(format!(
                "matmul contraction mismatch: {:?} x {:?}",
                sa, sb
            )));
        }
        let batch = broadcast_shapes(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let nbatch: usize = batch.iter().product();
        let pa = pad_shape(&sa[..sa.len() - 2], batch.len());
        let pb = pad_shape(&sb[..sb.len() - 2], batch.len());

        let mut out = vec![T::zero(); nbatch * m * n];
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        for i in 0..nbatch {
            let ia = broadcast_index(i, &batch, &pa);
            let ib = broadcast_index(i, &batch, &pb);
            matmul_acc(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Array::new(out_shape, out)?, Op::Matmul(a, b), rg))
    }

    /// Elementwise addition with trailing-axis broadcasting.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise (Hadamard) product with trailing-axis broadcasting.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<TensorId> {
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let pa = pad_shape(self.shape(a), out_shape.len());
        let pb = pad_shape(self.shape(b), out_shape.len());
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = da[broadcast_index(i, &out_shape, &pa)];
            let y = db[broadcast_index(i, &out_shape, &pb)];
            out.push(f(x, y));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Array::new(out_shape, out)?, op, rg))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let one = T::one();
        let v = self.nodes[x.0].value.map(|t| one / (one + (-t).exp()));
        let rg = self.requires(x);
        Ok(self.push(v, Op::Sigmoid(x), rg))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF written via `erf`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let v = self.nodes[x.0]
            .value
            .map(|t| half * t * (T::one() + (t * inv_sqrt2).erf()));
        let rg = self.requires(x);
        Ok(self.push(v, Op::Gelu(x), rg))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.nodes[x.0].value.map(|t| t.max(T::zero()));
        let rg = self.requires(x);
        Ok(self.push(v, Op::Relu(x), rg))
    }

    /// Softmax along the last axis, with max subtraction for stability.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dimension("softmax needs at least one axis"));
        }
        let v = softmax_last_axis(self.nodes[x.0].value.data(), *shape.last().unwrap());
        let rg = self.requires(x);
        Ok(self.push(Array::new(shape, v)?, Op::Softmax(x), rg))
    }

    /// Causal 1-D convolution along the time axis with a 3-tap kernel.
    ///
    /// `x` is `[batch, time, c_in]`, `w` is `[3, c_in, c_out]`. Output
    /// position `t` reads inputs at `{t, t-d, t-2d}`; positions before the
    /// start of the sequence contribute zero (left zero-padding).
    pub fn causal_conv1d(&mut self, x: TensorId, w: TensorId, dilation: usize) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 {
            return Err(Error::dimension(format!(
                "causal_conv1d input must be [batch, time, c_in], got {:?}",
                sx
            )));
        }
        if sw.len() != 3 || sw[0] != 3 || sw[1] != sx[2] {
            return Err(Error::dimension(format!(
                "causal_conv1d weight must be [3, {}, c_out], got {:?}",
                sx[2], sw
            )));
        }
        if dilation == 0 {
            return Err(Error::dimension("causal_conv1d dilation must be >= 1"));
        }
        let (b, t_len, c_in) = (sx[0], sx[1], sx[2]);
        let c_out = sw[2];
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut out = vec![T::zero(); b * t_len * c_out];
        for bi in 0..b {
            for t in 0..t_len {
                let orow = &mut out[(bi * t_len + t) * c_out..(bi * t_len + t + 1) * c_out];
                for tap in 0..3 {
                    let offset = tap * dilation;
                    if offset > t {
                        continue;
                    }
                    let src = t - offset;
                    let xrow = &xd[(bi * t_len + src) * c_in..(bi * t_len + src + 1) * c_in];
                    let wtap = &wd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                    for (i, &xv) in xrow.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wtap[i * c_out..(i + 1) * c_out];
                        for o in 0..c_out {
                            orow[o] = orow[o] + xv * wrow[o];
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w);
        Ok(self.push(
            Array::new(vec![b, t_len, c_out], out)?,
            Op::CausalConv1d { x, w, dilation },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.requires(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&mut self, x: TensorId, axes: Vec<usize>) -> Result<TensorId> {
        let v = permute_array(&self.nodes[x.0].value, &axes)?;
        let rg = self.requires(x);
        Ok(self.push(v, Op::Permute { x, axes }, rg))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::dimension("concat needs at least one operand"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::dimension(format!(
                "concat axis {} out of range for shape {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::dimension(format!(
                    "concat shapes differ outside axis {}: {:?} vs {:?}",
                    axis, first, s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        // Copy block-wise: each operand contributes contiguous runs of
        // length `axis_len * inner` per outer index.
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let out_row = axis_total * inner;
        let mut written = 0usize;
        for &p in parts {
            let s = self.shape(p).to_vec();
            let rows = s[axis] * inner;
            let data = self.nodes[p.0].value.data();
            for o in 0..outer {
                out[o * out_row + written..o * out_row + written + rows]
                    .copy_from_slice(&data[o * rows..(o + 1) * rows]);
            }
            written += rows;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Array::new(out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::index(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let data = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        let in_row = s[axis] * inner;
        for o in 0..outer {
            let base = o * in_row + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let rg = self.requires(x);
        Ok(self.push(
            Array::new(out_shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// an affine transform: `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| Error::dimension("layer_norm needs at least one axis"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dimension(format!(
                "layer_norm gain/bias must be [{}], got {:?} and {:?}",
                d,
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let epst = T::from_f64(eps);
        let invd = T::one() / T::from_f64(d as f64);
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..xd.len() / d {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * invd;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * invd;
            let inv_sigma = T::one() / (var + epst).sqrt();
            let orow = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                orow[i] = gd[i] * (row[i] - mean) * inv_sigma + bd[i];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Array::new(s, out)?,
            Op::LayerNorm { x, gain, bias, eps },
            rg,
        ))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and the
    /// survivors are scaled by `1/(1-p)`. `p == 0` is the identity and adds
    /// no node.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, p: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let xd = self.nodes[x.0].value.data();
        let out: Vec<T> = xd.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(Array::new(shape, out)?, Op::Dropout { x, mask }, rg))
    }

    /// Masked mean negative log-likelihood over the last axis of `logits`.
    ///
    /// `targets` and `mask` are flat over the leading axes; masked-out
    /// positions contribute nothing to either the sum or the denominator.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(Error::dimension(
                "cross_entropy logits need at least two axes",
            ));
        }
        let v = *s.last().unwrap();
        let rows = self.nodes[logits.0].value.numel() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dimension(format!(
                "cross_entropy expects {rows} targets and mask entries, got {} and {}",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::index(format!(
                "cross_entropy target {bad} out of range for {v} classes"
            )));
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(Error::data("cross_entropy mask selects no positions"));
        }
        let probs = softmax_last_axis(self.nodes[logits.0].value.data(), v);
        let mut total = T::zero();
        for r in 0..rows {
            if mask[r] {
                total = total - probs[r * v + targets[r]].ln();
            }
        }
        let loss = total / T::from_f64(m as f64);
        let rg = self.requires(logits);
        Ok(self.push(
            Array::new(vec![], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row lookup: `table` is `[vocab, d]`, `indices` has shape
    /// `batch_shape`, output is `[batch_shape.., d]`.
    pub fn gather(
        &mut self,
        table: TensorId,
        indices: &[usize],
        batch_shape: &[usize],
    ) -> Result<TensorId> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::dimension(format!(
                "gather table must be 2-D, got {:?}",
                s
            )));
        }
        let expected: usize = batch_shape.iter().product();
        if indices.len() != expected {
            return Err(Error::dimension(format!(
                "gather got {} indices for batch shape {:?}",
                indices.len(),
                batch_shape
            )));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::index(format!(
                "gather index {bad} out of range for table of {vocab} rows"
            )));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut out_shape = batch_shape.to_vec();
        out_shape.push(d);
        let rg = self.requires(table);
        Ok(self.push(
            Array::new(out_shape, out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let mut total = T::zero();
        for &v in self.nodes[x.0].value.data() {
            total = total + v;
        }
        let rg = self.requires(x);
        Ok(self.push(Array::new(vec![], vec![total])?, Op::Sum(x), rg))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: T) -> Result<TensorId> {
        let v = self.nodes[x.0].value.map(|t| t * c);
        let rg = self.requires(x);
        Ok(self.push(v, Op::Scale(x, c), rg))
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar root. Gradients add into the persistent
    /// slots, so successive calls accumulate.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::dimension(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut local: Vec<Option<Array<T>>> = vec![None; root.0 + 1];
        local[root.0] = Some(Array::full(self.nodes[root.0].value.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(gout) = local[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gout, &mut local);
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(gout.data()) {
                            *a = *a + *g;
                        }
                    }
                    slot => *slot = Some(gout),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &Array<T>, local: &mut [Option<Array<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => self.backward_matmul(*a, *b, gout, local),
            Op::Add(a, b) => {
                self.acc_broadcast(*a, gout, None, local);
                self.acc_broadcast(*b, gout, None, local);
            }
            Op::Mul(a, b) => {
                self.acc_broadcast(*a, gout, Some(*b), local);
                self.acc_broadcast(*b, gout, Some(*a), local);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let g: Vec<T> = gout
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                self.acc_into(*x, g, local);
            }
            Op::Gelu(x) => {
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let xd = self.nodes[x.0].value.data();
                let g: Vec<T> = gout
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-(x * x) * half).exp();
                        g * (cdf + x * pdf)
                    })
                    .collect();
                self.acc_into(*x, g, local);
            }
            Op::Relu(x) => {
                let xd = self.nodes[x.0].value.data();
                let g: Vec<T> = gout
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc_into(*x, g, local);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut g = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gout.data()[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot = dot + gv * yv;
                    }
                    for ((o, &gv), &yv) in g[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc_into(*x, g, local);
            }
            Op::CausalConv1d { x, w, dilation } => {
                self.backward_conv(*x, *w, *dilation, gout, local)
            }
            Op::Reshape(x) => {
                let g = gout
                    .clone()
                    .reshaped(self.nodes[x.0].value.shape().to_vec())
                    .expect("reshape backward preserves element count");
                self.acc_array(*x, g, local);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inv[a] = d;
                }
                let g = permute_array(gout, &inv).expect("inverse permutation is valid");
                self.acc_array(*x, g, local);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_row = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let s = self.nodes[p.0].value.shape().to_vec();
                    let rows = s[*axis] * inner;
                    let mut g = vec![T::zero(); outer * rows];
                    for o in 0..outer {
                        g[o * rows..(o + 1) * rows].copy_from_slice(
                            &gout.data()[o * out_row + offset..o * out_row + offset + rows],
                        );
                    }
                    self.acc_into(p, g, local);
                    offset += rows;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let in_row = s[*axis] * inner;
                let mut g = vec![T::zero(); self.nodes[x.0].value.numel()];
                for o in 0..outer {
                    let base = o * in_row + start * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&gout.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc_into(*x, g, local);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.backward_layer_norm(*x, *gain, *bias, *eps, gout, local)
            }
            Op::Dropout { x, mask } => {
                let g: Vec<T> = gout
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                self.acc_into(*x, g, local);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let seed = gout.data()[0];
                let v = *self.nodes[logits.0].value.shape().last().unwrap();
                let m = mask.iter().filter(|&&b| b).count();
                let inv_m = T::one() / T::from_f64(m as f64);
                let mut g = vec![T::zero(); probs.len()];
                for r in 0..targets.len() {
                    if !mask[r] {
                        continue;
                    }
                    let row = &mut g[r * v..(r + 1) * v];
                    let prow = &probs[r * v..(r + 1) * v];
                    for (o, &p) in row.iter_mut().zip(prow) {
                        *o = seed * p * inv_m;
                    }
                    row[targets[r]] = row[targets[r]] - seed * inv_m;
                }
                self.acc_into(*logits, g, local);
            }
            Op::Gather { table, indices } => {
                let d = self.nodes[table.0].value.shape()[1];
                let mut g = vec![T::zero(); self.nodes[table.0].value.numel()];
                for (p, &i) in indices.iter().enumerate() {
                    let src = &gout.data()[p * d..(p + 1) * d];
                    let dst = &mut g[i * d..(i + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
                self.acc_into(*table, g, local);
            }
            Op::Sum(x) => {
                let seed = gout.data()[0];
                let g = vec![seed; self.nodes[x.0].value.numel()];
                self.acc_into(*x, g, local);
            }
            Op::Scale(x, c) => {
                let g: Vec<T> = gout.data().iter().map(|&g| g * *c).collect();
                self.acc_into(*x, g, local);
            }
        }
    }

    fn backward_matmul(
        &self,
        a: TensorId,
        b: TensorId,
        gout: &Array<T>,
        local: &mut [Option<Array<T>>],
    ) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = gout.shape()[..gout.shape().len() - 2].to_vec();
        let nbatch: usize = batch.iter().product();
        let pa = pad_shape(&sa[..sa.len() - 2], batch.len());
        let pb = pad_shape(&sb[..sb.len() - 2], batch.len());
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let gd = gout.data();

        let need_a = self.requires(a);
        let need_b = self.requires(b);
        let mut ga = vec![T::zero(); if need_a { ad.len() } else { 0 }];
        let mut gb = vec![T::zero(); if need_b { bd.len() } else { 0 }];
        for i in 0..nbatch {
            let ia = broadcast_index(i, &batch, &pa);
            let ib = broadcast_index(i, &batch, &pb);
            let gslice = &gd[i * m * n..(i + 1) * m * n];
            if need_a {
                // dA = dC * B^T
                matmul_a_bt_acc(
                    gslice,
                    &bd[ib * k * n..(ib + 1) * k * n],
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
            if need_b {
                // dB = A^T * dC
                matmul_at_b_acc(
                    &ad[ia * m * k..(ia + 1) * m * k],
                    gslice,
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
        }
        if need_a {
            self.acc_into(a, ga, local);
        }
        if need_b {
            self.acc_into(b, gb, local);
        }
    }

    fn backward_conv(
        &self,
        x: TensorId,
        w: TensorId,
        dilation: usize,
        gout: &Array<T>,
        local: &mut [Option<Array<T>>],
    ) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let (b, t_len, c_in) = (sx[0], sx[1], sx[2]);
        let c_out = self.nodes[w.0].value.shape()[2];
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let gd = gout.data();

        if self.requires(x) {
            let mut gx = vec![T::zero(); xd.len()];
            for bi in 0..b {
                for t in 0..t_len {
                    let grow = &gd[(bi * t_len + t) * c_out..(bi * t_len + t + 1) * c_out];
                    for tap in 0..3 {
                        let offset = tap * dilation;
                        if offset > t {
                            continue;
                        }
                        let src = t - offset;
                        let wtap = &wd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                        let xrow =
                            &mut gx[(bi * t_len + src) * c_in..(bi * t_len + src + 1) * c_in];
                        for (i, gxi) in xrow.iter_mut().enumerate() {
                            let wrow = &wtap[i * c_out..(i + 1) * c_out];
                            let mut s = T::zero();
                            for (o, &gv) in grow.iter().enumerate() {
                                s = s + gv * wrow[o];
                            }
                            *gxi = *gxi + s;
                        }
                    }
                }
            }
            self.acc_into(x, gx, local);
        }
        if self.requires(w) {
            let mut gw = vec![T::zero(); wd.len()];
            for bi in 0..b {
                for t in 0..t_len {
                    let grow = &gd[(bi * t_len + t) * c_out..(bi * t_len + t + 1) * c_out];
                    for tap in 0..3 {
                        let offset = tap * dilation;
                        if offset > t {
                            continue;
                        }
                        let src = t - offset;
                        let xrow = &xd[(bi * t_len + src) * c_in..(bi * t_len + src + 1) * c_in];
                        let wtap = &mut gw[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                        for (i, &xv) in xrow.iter().enumerate() {
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &mut wtap[i * c_out..(i + 1) * c_out];
                            for (o, &gv) in grow.iter().enumerate() {
                                wrow[o] = wrow[o] + xv * gv;
                            }
                        }
                    }
                }
            }
            self.acc_into(w, gw, local);
        }
    }

    fn backward_layer_norm(
        &self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
        gout: &Array<T>,
        local: &mut [Option<Array<T>>],
    ) {
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gain.0].value.data();
        let d = gd.len();
        let rows = xd.len() / d;
        let epst = T::from_f64(eps);
        let invd = T::one() / T::from_f64(d as f64);

        let mut gx = vec![T::zero(); xd.len()];
        let mut ggain = vec![T::zero(); d];
        let mut gbias = vec![T::zero(); d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let grow = &gout.data()[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * invd;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * invd;
            let inv_sigma = T::one() / (var + epst).sqrt();

            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for i in 0..d {
                let xhat = (row[i] - mean) * inv_sigma;
                let dxhat = grow[i] * gd[i];
                mean_dxhat = mean_dxhat + dxhat;
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
                ggain[i] = ggain[i] + grow[i] * xhat;
                gbias[i] = gbias[i] + grow[i];
            }
            mean_dxhat = mean_dxhat * invd;
            mean_dxhat_xhat = mean_dxhat_xhat * invd;
            for i in 0..d {
                let xhat = (row[i] - mean) * inv_sigma;
                let dxhat = grow[i] * gd[i];
                gx[r * d + i] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_sigma;
            }
        }
        if self.requires(x) {
            self.acc_into(x, gx, local);
        }
        if self.requires(gain) {
            self.acc_into(gain, ggain, local);
        }
        if self.requires(bias) {
            self.acc_into(bias, gbias, local);
        }
    }

    /// Adds `gout` (shaped like the op output) into `target`'s local slot,
    /// reducing over broadcast axes and optionally multiplying by the value
    /// of `other` first (the product rule for `Mul`).
    fn acc_broadcast(
        &self,
        target: TensorId,
        gout: &Array<T>,
        other: Option<TensorId>,
        local: &mut [Option<Array<T>>],
    ) {
        if !self.requires(target) {
            return;
        }
        let tshape = self.nodes[target.0].value.shape().to_vec();
        let out_shape = gout.shape().to_vec();
        let pt = pad_shape(&tshape, out_shape.len());
        let po = other.map(|o| pad_shape(self.nodes[o.0].value.shape(), out_shape.len()));
        let od = other.map(|o| self.nodes[o.0].value.data());

        let mut g = vec![T::zero(); self.nodes[target.0].value.numel()];
        for i in 0..gout.numel() {
            let mut v = gout.data()[i];
            if let (Some(po), Some(od)) = (&po, od) {
                v = v * od[broadcast_index(i, &out_shape, po)];
            }
            let ti = broadcast_index(i, &out_shape, &pt);
            g[ti] = g[ti] + v;
        }
        self.acc_into(target, g, local);
    }

    fn acc_into(&self, target: TensorId, g: Vec<T>, local: &mut [Option<Array<T>>]) {
        if !self.requires(target) {
            return;
        }
        let shape = self.nodes[target.0].value.shape().to_vec();
        let arr = Array::new(shape, g).expect("gradient matches operand shape");
        self.acc_array(target, arr, local);
    }

    fn acc_array(&self, target: TensorId, g: Array<T>, local: &mut [Option<Array<T>>]) {
        if !self.requires(target) {
            return;
        }
        match &mut local[target.0] {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
            slot => *slot = Some(g),
        }
    }
}

/// Numerically stable softmax over contiguous rows of length `d`.
fn softmax_last_axis<T: Scalar>(data: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..data.len() / d {
        let row = &data[r * d..(r + 1) * d];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[r * d..(r + 1) * d];
        let mut total = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            total = total + e;
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    out
}
