//! The recorded computation graph. Operations append nodes in execution
//! order; backward visits them exactly once in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running batch-normalization statistics for one layer (per channel).
/// Persisted in checkpoints; updated only in train mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnRunningState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunningState {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// How a batch-normalization op executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; update running stats (momentum 0.1).
    Train,
    /// Normalize with batch statistics but leave running stats untouched.
    /// Keeps repeated forwards deterministic for gradient checks.
    TrainFrozen,
    /// Normalize with running statistics.
    Eval,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

struct BnCache {
    /// Normalized input, same layout as the input.
    xhat: Vec<f64>,
    /// Per-channel 1/sqrt(var + eps) actually used for normalization.
    inv_std: Vec<f64>,
    /// True when batch statistics were used (train-mode backward).
    batch_stats: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[m,n] + [n]`, the bias broadcast over rows.
    AddBias(usize, usize),
    ScaleConst(usize, f64),
    /// Tensor times a 1-element tensor.
    MulScalar(usize, usize),
    Recip(usize),
    /// `[m,k] x [k,n] -> [m,n]` or `[m,k] x [k] -> [m]`.
    Matmul(usize, usize),
    /// `[k] . [k] -> [1]`.
    Dot(usize, usize),
    Concat(Vec<usize>),
    /// Contiguous range of the input's flat data.
    Slice { input: usize, start: usize },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Conv1d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    BatchNorm { input: usize, gamma: usize, beta: usize, cache: BnCache },
    Dropout { input: usize, mask: Vec<f64> },
    Mean(usize),
    Mse { pred: usize, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of recorded operations. One tape per forward pass; single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

/// Parameter leaves bound onto a tape, addressable by name.
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// Seed drives dropout masks only.
    pub fn with_seed(seed: u64) -> Self {
        Self { nodes: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record an input (parameter or constant). Leaves receive gradients but
    /// have no parents.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Bind every parameter of a set as a leaf, in set order.
    pub fn bind(&mut self, params: &super::ParamSet) -> BoundParams {
        let mut names = Vec::with_capacity(params.len());
        let mut vars = Vec::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            names.push(name.to_string());
            vars.push(self.leaf(tensor.clone()));
        }
        BoundParams { names, vars }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NumericalError { op: name });
        }
        Ok(self.push(value, op))
    }

    fn shape_err(op: &'static str, detail: String) -> DiffError {
        DiffError::ShapeMismatch { op, detail }
    }

    // ---- elementwise and linear ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Mul(a.0, b.0), "mul")
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (shape_a, shape_b) = (ta.shape(), tb.shape());
        if shape_a.len() != 2 || shape_b.len() != 1 || shape_a[1] != shape_b[0] {
            return Err(Self::shape_err("add_bias", format!("{shape_a:?} vs {shape_b:?}")));
        }
        let (m, n) = (shape_a[0], shape_a[1]);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(ta.data()[r * n + c] + tb.data()[c]);
            }
        }
        let t = Tensor { shape: vec![m, n], data };
        self.checked(t, Op::AddBias(a.0, bias.0), "add_bias")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::ScaleConst(a.0, c), "scale")
    }

    /// Tensor times 1-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let ts = &self.nodes[s.0].value;
        if ts.len() != 1 {
            return Err(Self::shape_err("mul_scalar", format!("scalar has shape {:?}", ts.shape())));
        }
        let sv = ts.item();
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * sv).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::MulScalar(a.0, s.0), "mul_scalar")
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| 1.0 / x).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Recip(a.0), "recip")
    }

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let sa = ta.shape();
        let sb = tb.shape();
        if sa.len() != 2 {
            return Err(Self::shape_err("matmul", format!("lhs shape {sa:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        match sb {
            [k2, n] if *k2 == k => {
                let n = *n;
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let arow = &ta.data()[r * k..(r + 1) * k];
                    let out = &mut data[r * n..(r + 1) * n];
                    for (i, &av) in arow.iter().enumerate() {
                        let brow = &tb.data()[i * n..(i + 1) * n];
                        for (o, &bv) in out.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
                let t = Tensor { shape: vec![m, n], data };
                self.checked(t, Op::Matmul(a.0, b.0), "matmul")
            }
            [k2] if *k2 == k => {
                let mut data = vec![0.0; m];
                for r in 0..m {
                    let arow = &ta.data()[r * k..(r + 1) * k];
                    data[r] = arow.iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                }
                let t = Tensor { shape: vec![m], data };
                self.checked(t, Op::Matmul(a.0, b.0), "matmul")
            }
            _ => Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}"))),
        }
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 1 || ta.shape() != tb.shape() {
            return Err(Self::shape_err("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let v: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.checked(Tensor::scalar(v), Op::Dot(a.0, b.0), "dot")
    }

    /// Concatenate the flat data of the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let t = Tensor { shape: vec![data.len()], data };
        self.checked(t, Op::Concat(parts.iter().map(|v| v.0).collect()), "concat")
    }

    /// Vector view of `len` elements of the input's flat data from `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        if start + len > ta.len() || len == 0 {
            return Err(Self::shape_err(
                "slice",
                format!("range {start}..{} of {} elements", start + len, ta.len()),
            ));
        }
        let data = ta.data()[start..start + len].to_vec();
        let t = Tensor { shape: vec![len], data };
        self.checked(t, Op::Slice { input: a.0, start }, "slice")
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Relu(a.0), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Sigmoid(a.0), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Tanh(a.0), "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| softplus(x)).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Softplus(a.0), "softplus")
    }

    // ---- structured ops ----

    /// 1-D cross-correlation over a `[N, C_in, L]` batch with weight
    /// `[C_out, C_in, K]` and bias `[C_out]`. Output length is
    /// `floor((L + 2*padding - K)/stride) + 1`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, DiffError> {
        let (ti, tw, tb) =
            (&self.nodes[input.0].value, &self.nodes[weight.0].value, &self.nodes[bias.0].value);
        let (si, sw, sb) = (ti.shape(), tw.shape(), tb.shape());
        if si.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return Err(Self::shape_err("conv1d", format!("input {si:?} weight {sw:?} bias {sb:?}")));
        }
        let (n, c_in, l) = (si[0], si[1], si[2]);
        let (c_out, c_in_w, k) = (sw[0], sw[1], sw[2]);
        if c_in != c_in_w || sb[0] != c_out || stride == 0 {
            return Err(Self::shape_err("conv1d", format!("input {si:?} weight {sw:?} bias {sb:?}")));
        }
        if l + 2 * padding < k {
            return Err(Self::shape_err("conv1d", format!("kernel {k} exceeds padded length")));
        }
        let l_out = (l + 2 * padding - k) / stride + 1;
        let mut data = vec![0.0; n * c_out * l_out];
        for b in 0..n {
            for co in 0..c_out {
                let bias_v = tb.data()[co];
                for ol in 0..l_out {
                    let mut acc = bias_v;
                    let origin = (ol * stride) as isize - padding as isize;
                    for ci in 0..c_in {
                        let xrow = &ti.data()[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                        let wrow = &tw.data()[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let il = origin + kk as isize;
                            if il >= 0 && (il as usize) < l {
                                acc += wv * xrow[il as usize];
                            }
                        }
                    }
                    data[(b * c_out + co) * l_out + ol] = acc;
                }
            }
        }
        let t = Tensor { shape: vec![n, c_out, l_out], data };
        self.checked(t, Op::Conv1d { input: input.0, weight: weight.0, bias: bias.0, stride, padding }, "conv1d")
    }

    /// Per-channel normalization of a `[N, C, L]` batch; `gamma`/`beta` are
    /// `[C]`. Train modes use batch statistics over the `(N, L)` positions
    /// (biased variance); eval mode uses the running statistics. Running
    /// stats update (mode [`BnMode::Train`]) follows
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance, momentum 0.1.
    pub fn batchnorm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnRunningState,
        mode: BnMode,
    ) -> Result<Var, DiffError> {
        let (ti, tg, tb) =
            (&self.nodes[input.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let si = ti.shape();
        if si.len() != 3 {
            return Err(Self::shape_err("batchnorm1d", format!("input {si:?}")));
        }
        let (n, c, l) = (si[0], si[1], si[2]);
        if tg.shape() != [c] || tb.shape() != [c] || state.mean.len() != c {
            return Err(Self::shape_err(
                "batchnorm1d",
                format!("channels {c}, gamma {:?}, beta {:?}, state {}", tg.shape(), tb.shape(), state.mean.len()),
            ));
        }
        let m = (n * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let batch_stats = mode != BnMode::Eval;
        if batch_stats {
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let row = &ti.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                    sum += row.iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let row = &ti.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                    ss += row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            if mode == BnMode::Train {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..c {
                    state.mean[ch] = (1.0 - BN_MOMENTUM) * state.mean[ch] + BN_MOMENTUM * mean[ch];
                    state.var[ch] =
                        (1.0 - BN_MOMENTUM) * state.var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
        } else {
            mean.copy_from_slice(&state.mean);
            var.copy_from_slice(&state.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c * l];
        let mut data = vec![0.0; n * c * l];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * l;
                let (g, be) = (tg.data()[ch], tb.data()[ch]);
                for i in 0..l {
                    let xh = (ti.data()[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = xh;
                    data[base + i] = g * xh + be;
                }
            }
        }
        let t = Tensor { shape: vec![n, c, l], data };
        let cache = BnCache { xhat, inv_std, batch_stats };
        self.checked(t, Op::BatchNorm { input: input.0, gamma: gamma.0, beta: beta.0, cache }, "batchnorm1d")
    }

    /// Inverted dropout. When inactive (eval) or `p == 0` this is the
    /// identity and records nothing.
    pub fn dropout(&mut self, a: Var, p: f64, active: bool) -> Result<Var, DiffError> {
        if !active || p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Self::shape_err("dropout", format!("p = {p} outside [0, 1)")));
        }
        let keep = 1.0 - p;
        let len = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor { shape: ta.shape().to_vec(), data };
        self.checked(t, Op::Dropout { input: a.0, mask }, "dropout")
    }

    // ---- reductions ----

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = &self.nodes[a.0].value;
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.checked(Tensor::scalar(v), Op::Mean(a.0), "mean")
    }

    /// Sum of all elements (mean scaled by the element count).
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.nodes[a.0].value.len() as f64;
        let m = self.mean(a)?;
        self.scale(m, n)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, DiffError> {
        let tp = &self.nodes[pred.0].value;
        if tp.shape() != target.shape() {
            return Err(Self::shape_err("mse", format!("{:?} vs {:?}", tp.shape(), target.shape())));
        }
        let v = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / tp.len() as f64;
        self.checked(Tensor::scalar(v), Op::Mse { pred: pred.0, target: target.clone() }, "mse")
    }

    // ---- backward ----

    /// Gradient of a 1-element output with respect to every node.
    /// Nodes off the active path get zero gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(DiffError::NotScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &(src, _) in [(*a, 0), (*b, 1)].iter() {
                    let len = self.nodes[src].value.len();
                    Self::accumulate(grads, src, len, |dst| {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                let len = self.nodes[*a].value.len();
                Self::accumulate(grads, *a, len, |dst| {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let len = self.nodes[*b].value.len();
                Self::accumulate(grads, *b, len, |dst| {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                Self::accumulate(grads, *a, va.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * vb[i];
                    }
                });
                Self::accumulate(grads, *b, vb.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBias(a, bias) => {
                let sa = self.nodes[*a].value.shape();
                let (m, n) = (sa[0], sa[1]);
                Self::accumulate(grads, *a, m * n, |dst| {
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                Self::accumulate(grads, *bias, n, |dst| {
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::ScaleConst(a, c) => {
                let len = self.nodes[*a].value.len();
                Self::accumulate(grads, *a, len, |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * c;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[*s].value.item();
                let va = self.nodes[*a].value.data();
                Self::accumulate(grads, *a, va.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * sv;
                    }
                });
                let contrib: f64 = g.iter().zip(va).map(|(gv, xv)| gv * xv).sum();
                Self::accumulate(grads, *s, 1, |dst| dst[0] += contrib);
            }
            Op::Recip(a) => {
                let y = node.value.data();
                let len = y.len();
                Self::accumulate(grads, *a, len, |dst| {
                    for i in 0..len {
                        dst[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                if tb.shape().len() == 2 {
                    let n = tb.shape()[1];
                    // dA = G x B^T
                    Self::accumulate(grads, *a, m * k, |dst| {
                        for r in 0..m {
                            for i in 0..k {
                                let brow = &tb.data()[i * n..(i + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                dst[r * k + i] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    // dB = A^T x G
                    Self::accumulate(grads, *b, k * n, |dst| {
                        for r in 0..m {
                            let arow = &ta.data()[r * k..(r + 1) * k];
                            let grow = &g[r * n..(r + 1) * n];
                            for (i, &av) in arow.iter().enumerate() {
                                let drow = &mut dst[i * n..(i + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    });
                } else {
                    // y = A x, dA = g (x)^T outer, dx = A^T g
                    let x = tb.data();
                    Self::accumulate(grads, *a, m * k, |dst| {
                        for r in 0..m {
                            let gv = g[r];
                            let drow = &mut dst[r * k..(r + 1) * k];
                            for (d, &xv) in drow.iter_mut().zip(x) {
                                *d += gv * xv;
                            }
                        }
                    });
                    Self::accumulate(grads, *b, k, |dst| {
                        for r in 0..m {
                            let gv = g[r];
                            let arow = &ta.data()[r * k..(r + 1) * k];
                            for (d, &av) in dst.iter_mut().zip(arow) {
                                *d += gv * av;
                            }
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let gv = g[0];
                Self::accumulate(grads, *a, va.len(), |dst| {
                    for (d, &y) in dst.iter_mut().zip(vb) {
                        *d += gv * y;
                    }
                });
                Self::accumulate(grads, *b, vb.len(), |dst| {
                    for (d, &x) in dst.iter_mut().zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let piece = &g[offset..offset + len];
                    Self::accumulate(grads, p, len, |dst| {
                        for (d, gv) in dst.iter_mut().zip(piece) {
                            *d += gv;
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, start } => {
                let len = self.nodes[*input].value.len();
                let start = *start;
                Self::accumulate(grads, *input, len, |dst| {
                    for (i, gv) in g.iter().enumerate() {
                        dst[start + i] += gv;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                Self::accumulate(grads, *a, x.len(), |dst| {
                    for i in 0..dst.len() {
                        if x[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                Self::accumulate(grads, *a, y.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                Self::accumulate(grads, *a, y.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.nodes[*a].value.data();
                Self::accumulate(grads, *a, x.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Conv1d { input, weight, bias, stride, padding } => {
                let (ti, tw) = (&self.nodes[*input].value, &self.nodes[*weight].value);
                let (n, c_in, l) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (c_out, _, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let l_out = node.value.shape()[2];
                let (stride, padding) = (*stride, *padding);
                Self::accumulate(grads, *input, n * c_in * l, |dst| {
                    for b in 0..n {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                            for ci in 0..c_in {
                                let wrow = &tw.data()[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                                let drow = &mut dst[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                                for (ol, &gv) in grow.iter().enumerate() {
                                    let origin = (ol * stride) as isize - padding as isize;
                                    for (kk, &wv) in wrow.iter().enumerate() {
                                        let il = origin + kk as isize;
                                        if il >= 0 && (il as usize) < l {
                                            drow[il as usize] += gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accumulate(grads, *weight, c_out * c_in * k, |dst| {
                    for b in 0..n {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                            for ci in 0..c_in {
                                let xrow = &ti.data()[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                                let drow = &mut dst[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                                for (ol, &gv) in grow.iter().enumerate() {
                                    let origin = (ol * stride) as isize - padding as isize;
                                    for (kk, d) in drow.iter_mut().enumerate() {
                                        let il = origin + kk as isize;
                                        if il >= 0 && (il as usize) < l {
                                            *d += gv * xrow[il as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::accumulate(grads, *bias, c_out, |dst| {
                    for b in 0..n {
                        for co in 0..c_out {
                            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                            dst[co] += grow.iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BatchNorm { input, gamma, beta, cache } => {
                let ti = &self.nodes[*input].value;
                let (n, c, l) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let tg = self.nodes[*gamma].value.data();
                let m = (n * l) as f64;
                // Per-channel sums of g and g*xhat.
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * l;
                        for i in 0..l {
                            sum_g[ch] += g[base + i];
                            sum_gx[ch] += g[base + i] * cache.xhat[base + i];
                        }
                    }
                }
                Self::accumulate(grads, *gamma, c, |dst| {
                    for ch in 0..c {
                        dst[ch] += sum_gx[ch];
                    }
                });
                Self::accumulate(grads, *beta, c, |dst| {
                    for ch in 0..c {
                        dst[ch] += sum_g[ch];
                    }
                });
                let batch_stats = cache.batch_stats;
                Self::accumulate(grads, *input, n * c * l, |dst| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * l;
                            let scale = tg[ch] * cache.inv_std[ch];
                            if batch_stats {
                                for i in 0..l {
                                    dst[base + i] += scale / m
                                        * (m * g[base + i]
                                            - sum_g[ch]
                                            - cache.xhat[base + i] * sum_gx[ch]);
                                }
                            } else {
                                for i in 0..l {
                                    dst[base + i] += scale * g[base + i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                Self::accumulate(grads, *input, mask.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len();
                let gv = g[0] / len as f64;
                Self::accumulate(grads, *a, len, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let vp = self.nodes[*pred].value.data();
                let nf = vp.len() as f64;
                let gv = g[0];
                Self::accumulate(grads, *pred, vp.len(), |dst| {
                    for i in 0..dst.len() {
                        dst[i] += gv * 2.0 * (vp[i] - target.data()[i]) / nf;
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`]: per-node gradients.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is off the active path.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Gradients for every bound parameter, in binding order.
    pub fn wrt_all(&self, bound: &BoundParams) -> Vec<Tensor> {
        bound.vars().iter().map(|&v| self.wrt(v)).collect()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v))
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, 3.0);
        let y = tape.mul(w, w).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(w).item(), 6.0);
    }

    #[test]
    fn mse_of_scaled_input_gradient() {
        // f(w) = mse(w*x, y) with x=[1,2], y=[0,0], w=1 -> grad = 5
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, 1.0);
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let wx = tape.mul_scalar(x, w).unwrap();
        let loss = tape.mse(wx, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(tape.value(loss).item(), 2.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).item(), 5.0);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, 3.0);
        let unused = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.mul(w, w).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.7, 4.2]));
        let loss = tape.mse(x, &Tensor::vector(vec![0.3, -1.7, 4.2])).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn conv1d_output_lengths() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 32]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y1 = tape.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(tape.value(y1).shape(), &[1, 1, 32]);
        let y2 = tape.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y2).shape(), &[1, 1, 16]);
    }

    /// Direct reference convolution: explicitly materialize the padded
    /// signal, then slide the kernel. Independent of the op's loop.
    fn conv1d_reference(x: &[f64], w: &[f64], bias: f64, stride: usize, padding: usize) -> Vec<f64> {
        let mut padded = vec![0.0; x.len() + 2 * padding];
        padded[padding..padding + x.len()].copy_from_slice(x);
        let l_out = (padded.len() - w.len()) / stride + 1;
        (0..l_out)
            .map(|o| {
                bias + w
                    .iter()
                    .enumerate()
                    .map(|(k, &wv)| wv * padded[o * stride + k])
                    .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn conv1d_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding, l, k) in &[(1usize, 1usize, 9usize, 3usize), (2, 1, 12, 3), (3, 2, 10, 5)] {
            let x: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = rng.random_range(-0.5..0.5);
            let mut tape = Tape::new();
            let xv = tape.leaf(Tensor::new(vec![1, 1, l], x.clone()).unwrap());
            let wv = tape.leaf(Tensor::new(vec![1, 1, k], w.clone()).unwrap());
            let bv = tape.leaf(Tensor::vector(vec![bias]));
            let y = tape.conv1d(xv, wv, bv, stride, padding).unwrap();
            let expect = conv1d_reference(&x, &w, bias, stride, padding);
            for (a, b) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn concat_slice_partition_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let whole = tape.concat(&[a, b]).unwrap();
        // Loss touches every element with distinct weights through slices.
        let s1 = tape.slice(whole, 0, 2).unwrap();
        let s2 = tape.slice(whole, 2, 3).unwrap();
        let w1 = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let w2 = tape.leaf(Tensor::vector(vec![0.5, 3.0, -1.0]));
        let d1 = tape.dot(s1, w1).unwrap();
        let d2 = tape.dot(s2, w2).unwrap();
        let loss = tape.add(d1, d2).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Sum of piece gradients equals whole gradient.
        let gw = grads.wrt(whole);
        assert_eq!(gw.data(), &[1.0, -2.0, 0.5, 3.0, -1.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0, -2.0]);
        assert_eq!(grads.wrt(b).data(), &[0.5, 3.0, -1.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::with_seed(3);
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.dropout(x, 0.5, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_preserves_mean_roughly() {
        let mut tape = Tape::with_seed(11);
        let x = tape.leaf(Tensor::vector(vec![1.0; 10_000]));
        let y = tape.dropout(x, 0.1, true).unwrap();
        let m = tape.value(y).data().iter().sum::<f64>() / 10_000.0;
        assert!((m - 1.0).abs() < 0.02, "mean {m}");
    }

    #[test]
    fn numerical_error_detected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e308, 1e308]));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, DiffError::NumericalError { .. }));
    }

    #[test]
    fn matmul_matvec_agree() {
        // [m,k] x [k,1] column equals [m,k] x [k] vector
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let col = tape.leaf(Tensor::matrix(3, 1, vec![1.0, -1.0, 2.0]).unwrap());
        let vecb = tape.leaf(Tensor::vector(vec![1.0, -1.0, 2.0]));
        let y1 = tape.matmul(a, col).unwrap();
        let y2 = tape.matmul(a, vecb).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(y2).data());
        assert_eq!(tape.value(y2).data(), &[5.0, 11.0]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![1.0]));
        let beta = tape.leaf(Tensor::vector(vec![0.0]));
        let mut state = BnRunningState::new(1);
        let y = tape.batchnorm1d(x, gamma, beta, &mut state, BnMode::Train).unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks the variance
        // Running stats moved toward batch stats.
        assert!((state.mean[0] - 0.25).abs() < 1e-12); // 0.9*0 + 0.1*2.5
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2], vec![5.0, 7.0]).unwrap());
        let gamma = tape.leaf(Tensor::vector(vec![2.0]));
        let beta = tape.leaf(Tensor::vector(vec![1.0]));
        let mut state = BnRunningState { mean: vec![5.0], var: vec![4.0] };
        let y = tape.batchnorm1d(x, gamma, beta, &mut state, BnMode::Eval).unwrap();
        let out = tape.value(y).data();
        // (5-5)/2 * 2 + 1 = 1; (7-5)/2 * 2 + 1 = 3 (up to eps)
        assert!((out[0] - 1.0).abs() < 1e-5);
        assert!((out[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn sum_is_mean_times_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 4.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s).item(), 7.0);
    }

    #[test]
    fn softplus_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 100.0, -100.0]));
        let sp = tape.softplus(x).unwrap();
        let sg = tape.sigmoid(x).unwrap();
        let spv = tape.value(sp).data();
        let sgv = tape.value(sg).data();
        assert!((spv[0] - 2f64.ln()).abs() < 1e-15);
        assert!((spv[1] - 100.0).abs() < 1e-12);
        assert!(spv[2] >= 0.0 && spv[2] < 1e-40);
        assert_eq!(sgv[0], 0.5);
        assert!(sgv[1] > 0.0 && sgv[2] > 0.0);
    }
}
