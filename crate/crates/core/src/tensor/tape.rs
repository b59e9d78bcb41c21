use std::rc::Rc;

use rand::Rng;

use super::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Whether dropout masks are drawn. Everything else is identical between
/// the two modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A linear map on R^dim applied column-wise by [`Tape::apply_cols`].
/// Implementors supply the transpose for the backward pass.
pub trait VecMap {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);
}

enum BackOp {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Tanh(TensorId),
    Relu(TensorId),
    Abs(TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    SoftmaxRows(TensorId),
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        kernel: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    ExpandRows(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    SliceCols {
        a: TensorId,
        lo: usize,
    },
    ConcatCols(Vec<TensorId>),
    GatherCols {
        a: TensorId,
        indices: Vec<usize>,
    },
    MeanRows(TensorId),
    MaxPoolRows2 {
        a: TensorId,
        argmax: Vec<usize>,
    },
    Dropout {
        a: TensorId,
        mask: Vec<f64>,
    },
    ApplyCols {
        a: TensorId,
        map: Rc<dyn VecMap>,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    op: BackOp,
}

/// Wengert tape. Nodes are appended in forward order, so the list is
/// topologically sorted by construction and `backward` visits each node
/// exactly once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
}

impl Tape {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: BackOp) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Insert a leaf. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, BackOp::Leaf)
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        assert!(v.is_scalar(), "scalar_value on shape {:?}", v.shape());
        v.data()[0]
    }

    /// Gradient buffer of a node; zeros until `backward` has run.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.rg(id)
    }

    /// NaN/Inf audit over every node on the tape.
    pub fn audit_finite(&self) -> Result<(), super::TensorError> {
        for node in &self.nodes {
            node.value.audit_finite()?;
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_same_shape(&self, op: &str, a: TensorId, b: TensorId) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert_eq!(sa, sb, "{op}: operand shapes differ: {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape("add", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, BackOp::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape("sub", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, BackOp::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape("mul", a, b);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, BackOp::Mul(a, b))
    }

    /// Multiply by a plain scalar constant (the only broadcast in the op set).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Scale(a, c))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Tanh(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Relu(a))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Abs(a))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        let (kb, n) = (vb.rows(), vb.cols());
        assert_eq!(
            k, kb,
            "matmul: inner dimensions disagree: lhs {:?} rhs {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, BackOp::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = va.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Transpose(a))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let value = Tensor::new(vec![m, n], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::SoftmaxRows(a))
    }

    /// 1-D convolution over time with same-length zero padding.
    /// `x` is T x C_in, `w` is [C_out, C_in, k] with k odd, `b` is [C_out].
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let wshape = vw.shape();
        assert_eq!(wshape.len(), 3, "conv1d: weights must be [C_out, C_in, k]");
        let (c_out, c_in, kernel) = (wshape[0], wshape[1], wshape[2]);
        assert!(
            kernel % 2 == 1,
            "conv1d: kernel size must be odd, got {kernel}"
        );
        assert_eq!(
            vx.cols(),
            c_in,
            "conv1d: input channels {} do not match weight channels {c_in}",
            vx.cols()
        );
        assert_eq!(vb.numel(), c_out, "conv1d: bias length mismatch");
        let t_len = vx.rows();
        let half = kernel / 2;
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for o in 0..c_out {
                let mut acc = vb.data()[o];
                for j in 0..kernel {
                    let s = t + j;
                    if s < half || s - half >= t_len {
                        continue;
                    }
                    let s = s - half;
                    let xrow = &vx.data()[s * c_in..(s + 1) * c_in];
                    let wrow = &vw.data()[(o * c_in) * kernel + j..];
                    for c in 0..c_in {
                        acc += xrow[c] * wrow[c * kernel];
                    }
                }
                out[t * c_out + o] = acc;
            }
        }
        let value = Tensor::new(vec![t_len, c_out], out).unwrap();
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(value, rg, BackOp::Conv1d { x, w, b, kernel })
    }

    /// Per-row layer normalization with epsilon 1e-6 inside the square root.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        const EPS: f64 = 1e-6;
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let (t_len, d) = (vx.rows(), vx.cols());
        assert!(d >= 2, "layer_norm: feature dimension must be >= 2, got {d}");
        assert_eq!(vg.numel(), d, "layer_norm: gain length mismatch");
        assert_eq!(vb.numel(), d, "layer_norm: bias length mismatch");
        let mut out = vec![0.0; t_len * d];
        let mut inv_std = vec![0.0; t_len];
        let mut xhat = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &vx.data()[t * d..(t + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[t] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[t * d + j] = h;
                out[t * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(vec![t_len, d], out).unwrap();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            rg,
            BackOp::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                xhat,
            },
        )
    }

    // ---- structural --------------------------------------------------------

    /// Row lookup: `table` is V x D, output is len(ids) x D.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range for vocab {v}");
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out).unwrap();
        let rg = self.rg(table);
        self.push(
            value,
            rg,
            BackOp::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Repeat a 1 x D row `t` times: the explicit expand that stands in for
    /// broadcasting.
    pub fn expand_rows(&mut self, v: TensorId, t: usize) -> TensorId {
        let vv = self.value(v);
        assert_eq!(vv.rows(), 1, "expand_rows: expected 1 x D, got {:?}", vv.shape());
        let d = vv.cols();
        let mut out = Vec::with_capacity(t * d);
        for _ in 0..t {
            out.extend_from_slice(vv.data());
        }
        let value = Tensor::new(vec![t, d], out).unwrap();
        let rg = self.rg(v);
        self.push(value, rg, BackOp::ExpandRows(v))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, BackOp::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel() as f64;
        let s = self.value(a).data().iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, BackOp::Mean(a))
    }

    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(lo < hi && hi <= n, "slice_cols: [{lo}, {hi}) out of {n}");
        let mut out = Vec::with_capacity(m * (hi - lo));
        for i in 0..m {
            out.extend_from_slice(&va.data()[i * n + lo..i * n + hi]);
        }
        let value = Tensor::new(vec![m, hi - lo], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::SliceCols { a, lo })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        for &p in parts {
            assert_eq!(
                self.value(p).rows(),
                m,
                "concat_cols: row counts differ"
            );
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let vp = self.value(p);
                let n = vp.cols();
                out.extend_from_slice(&vp.data()[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m, total], out).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, rg, BackOp::ConcatCols(parts.to_vec()))
    }

    /// Select columns by index (duplicates allowed).
    pub fn gather_cols(&mut self, a: TensorId, indices: &[usize]) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        for &j in indices {
            assert!(j < n, "gather_cols: index {j} out of {n}");
        }
        let mut out = Vec::with_capacity(m * indices.len());
        for i in 0..m {
            let row = &va.data()[i * n..(i + 1) * n];
            for &j in indices {
                out.push(row[j]);
            }
        }
        let value = Tensor::new(vec![m, indices.len()], out).unwrap();
        let rg = self.rg(a);
        self.push(
            value,
            rg,
            BackOp::GatherCols {
                a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Temporal mean pooling: T x D -> 1 x D.
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(m >= 1, "mean_rows: empty input");
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += va.data()[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        let value = Tensor::new(vec![1, n], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::MeanRows(a))
    }

    /// Temporal max pooling with kernel 2, stride 2 (trailing odd row dropped).
    pub fn max_pool_rows2(&mut self, a: TensorId) -> TensorId {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        assert!(m >= 2, "max_pool_rows2: need at least 2 rows, got {m}");
        let out_rows = m / 2;
        let mut out = vec![0.0; out_rows * n];
        let mut argmax = vec![0usize; out_rows * n];
        for o in 0..out_rows {
            for j in 0..n {
                let (r0, r1) = (2 * o, 2 * o + 1);
                let (v0, v1) = (va.data()[r0 * n + j], va.data()[r1 * n + j]);
                if v1 > v0 {
                    out[o * n + j] = v1;
                    argmax[o * n + j] = r1;
                } else {
                    out[o * n + j] = v0;
                    argmax[o * n + j] = r0;
                }
            }
        }
        let value = Tensor::new(vec![out_rows, n], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::MaxPoolRows2 { a, argmax })
    }

    /// Inverted-scaling dropout. A no-op at inference; in training the
    /// Bernoulli mask is drawn when the node is appended, so draw order is
    /// fixed by tape construction order.
    pub fn dropout<R: Rng>(&mut self, a: TensorId, rate: f64, rng: &mut R) -> TensorId {
        assert!((0.0..1.0).contains(&rate), "dropout: bad rate {rate}");
        if self.mode == Mode::Infer || rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::Dropout { a, mask })
    }

    /// Apply a linear map to every column of a D x K tensor.
    pub fn apply_cols(&mut self, a: TensorId, map: Rc<dyn VecMap>) -> TensorId {
        let va = self.value(a);
        let (d, k) = (va.rows(), va.cols());
        assert_eq!(
            d,
            map.dim(),
            "apply_cols: map dimension {} does not match rows {d}",
            map.dim()
        );
        let mut out = vec![0.0; d * k];
        let mut col = vec![0.0; d];
        let mut mapped = vec![0.0; d];
        for j in 0..k {
            for i in 0..d {
                col[i] = va.data()[i * k + j];
            }
            map.apply(&col, &mut mapped);
            for i in 0..d {
                out[i * k + j] = mapped[i];
            }
        }
        let value = Tensor::new(vec![d, k], out).unwrap();
        let rg = self.rg(a);
        self.push(value, rg, BackOp::ApplyCols { a, map })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates `grad` for every
    /// `requires_grad` node reachable from the loss; unreachable gradients
    /// stay zero.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(
            self.value(loss).is_scalar(),
            "backward: loss must be scalar, got shape {:?}",
            self.value(loss).shape()
        );
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = vec![0.0; node.value.numel()];
            } else {
                node.grad.clear();
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[idx].grad);
            self.propagate(idx, &g);
            self.nodes[idx].grad = g;
        }
    }

    fn add_grad(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if self.nodes[id.0].requires_grad {
            let mut grad = std::mem::take(&mut self.nodes[id.0].grad);
            f(&mut grad);
            self.nodes[id.0].grad = grad;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Split borrows: op data is read via raw copies where cheap; values
        // are re-borrowed immutably per closure call.
        let op = std::mem::replace(&mut self.nodes[idx].op, BackOp::Leaf);
        match &op {
            BackOp::Leaf => {}
            BackOp::Add(a, b) => {
                self.add_grad(*a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            BackOp::Sub(a, b) => {
                self.add_grad(*a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.add_grad(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            BackOp::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                let av = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            BackOp::Scale(a, c) => {
                let c = *c;
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * c;
                    }
                });
            }
            BackOp::Tanh(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            BackOp::Relu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            BackOp::Abs(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * x[i].signum() * (x[i] != 0.0) as u8 as f64;
                    }
                });
            }
            BackOp::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                // dA = g . B^T
                let bv = self.nodes[b.0].value.data().to_vec();
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T . g
                let av = self.nodes[a.0].value.data().to_vec();
                self.add_grad(*b, |gb| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = arow[p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                dst[j] += aip * grow[j];
                            }
                        }
                    }
                });
            }
            BackOp::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            BackOp::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                let (m, n) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        let yrow = &y[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[i * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            BackOp::Conv1d { x, w, b, kernel } => {
                let kernel = *kernel;
                let half = kernel / 2;
                let t_len = self.nodes[x.0].value.rows();
                let c_in = self.nodes[x.0].value.cols();
                let c_out = self.nodes[b.0].value.numel();
                self.add_grad(*b, |gb| {
                    for t in 0..t_len {
                        for o in 0..c_out {
                            gb[o] += g[t * c_out + o];
                        }
                    }
                });
                let xv = self.nodes[x.0].value.data().to_vec();
                self.add_grad(*w, |gw| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..kernel {
                            let s = t + j;
                            if s < half || s - half >= t_len {
                                continue;
                            }
                            let s = s - half;
                            let xrow = &xv[s * c_in..(s + 1) * c_in];
                            for o in 0..c_out {
                                let go = grow[o];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    gw[(o * c_in + c) * kernel + j] += go * xrow[c];
                                }
                            }
                        }
                    }
                });
                let wv = self.nodes[w.0].value.data().to_vec();
                self.add_grad(*x, |gx| {
                    for t in 0..t_len {
                        let grow = &g[t * c_out..(t + 1) * c_out];
                        for j in 0..kernel {
                            let s = t + j;
                            if s < half || s - half >= t_len {
                                continue;
                            }
                            let s = s - half;
                            let dst = &mut gx[s * c_in..(s + 1) * c_in];
                            for o in 0..c_out {
                                let go = grow[o];
                                if go == 0.0 {
                                    continue;
                                }
                                let wrow = &wv[(o * c_in) * kernel + j..];
                                for c in 0..c_in {
                                    dst[c] += go * wrow[c * kernel];
                                }
                            }
                        }
                    }
                });
            }
            BackOp::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                xhat,
            } => {
                let (t_len, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                self.add_grad(*bias, |gb| {
                    for t in 0..t_len {
                        for j in 0..d {
                            gb[j] += g[t * d + j];
                        }
                    }
                });
                self.add_grad(*gain, |gg| {
                    for t in 0..t_len {
                        for j in 0..d {
                            gg[j] += g[t * d + j] * xhat[t * d + j];
                        }
                    }
                });
                let gv = self.nodes[gain.0].value.data().to_vec();
                self.add_grad(*x, |gx| {
                    for t in 0..t_len {
                        let grow = &g[t * d..(t + 1) * d];
                        let hrow = &xhat[t * d..(t + 1) * d];
                        let mut mean_gy = 0.0;
                        let mut mean_gyh = 0.0;
                        for j in 0..d {
                            let gy = grow[j] * gv[j];
                            mean_gy += gy;
                            mean_gyh += gy * hrow[j];
                        }
                        mean_gy /= d as f64;
                        mean_gyh /= d as f64;
                        for j in 0..d {
                            let gy = grow[j] * gv[j];
                            gx[t * d + j] += inv_std[t] * (gy - mean_gy - hrow[j] * mean_gyh);
                        }
                    }
                });
            }
            BackOp::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                self.add_grad(*table, |gt| {
                    for (t, &id) in ids.iter().enumerate() {
                        let src = &g[t * d..(t + 1) * d];
                        let dst = &mut gt[id * d..(id + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                });
            }
            BackOp::ExpandRows(v) => {
                let d = self.nodes[v.0].value.cols();
                let t_len = g.len() / d;
                self.add_grad(*v, |gv| {
                    for t in 0..t_len {
                        for j in 0..d {
                            gv[j] += g[t * d + j];
                        }
                    }
                });
            }
            BackOp::Sum(a) => {
                self.add_grad(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            BackOp::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.add_grad(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            BackOp::SliceCols { a, lo } => {
                let lo = *lo;
                let n = self.nodes[a.0].value.cols();
                let width = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        for j in 0..width {
                            ga[i * n + lo + j] += g[i * width + j];
                        }
                    }
                });
            }
            BackOp::ConcatCols(parts) => {
                let m = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.cols();
                    self.add_grad(p, |gp| {
                        for i in 0..m {
                            for j in 0..n {
                                gp[i * n + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            BackOp::GatherCols { a, indices } => {
                let n = self.nodes[a.0].value.cols();
                let m = self.nodes[a.0].value.rows();
                let width = indices.len();
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        for (jj, &j) in indices.iter().enumerate() {
                            ga[i * n + j] += g[i * width + jj];
                        }
                    }
                });
            }
            BackOp::MeanRows(a) => {
                let (m, n) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                self.add_grad(*a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            BackOp::MaxPoolRows2 { a, argmax } => {
                let n = self.nodes[a.0].value.cols();
                let out_rows = self.nodes[idx].value.rows();
                self.add_grad(*a, |ga| {
                    for o in 0..out_rows {
                        for j in 0..n {
                            ga[argmax[o * n + j] * n + j] += g[o * n + j];
                        }
                    }
                });
            }
            BackOp::Dropout { a, mask } => {
                self.add_grad(*a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            BackOp::ApplyCols { a, map } => {
                let (d, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let mut col = vec![0.0; d];
                let mut mapped = vec![0.0; d];
                self.add_grad(*a, |ga| {
                    for j in 0..k {
                        for i in 0..d {
                            col[i] = g[i * k + j];
                        }
                        map.apply_transpose(&col, &mut mapped);
                        for i in 0..d {
                            ga[i * k + j] += mapped[i];
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}

/// c += a . b with a: m x k, b: k x n, all row-major. The inner loops run
/// over contiguous rows so the compiler can vectorize.
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(t(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_rejects_shape_mismatch() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "operand shapes differ")]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        tape.add(a, b);
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(t(&[vec![0.0, -3.0, 3.0]]));
        let th = tape.tanh(a);
        let re = tape.relu(a);
        assert_eq!(tape.value(th).data()[0], 0.0);
        assert_eq!(tape.value(re).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new(Mode::Infer);
        let a = tape.constant(t(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, 0.0]]));
        let s = tape.softmax_rows(a);
        let v = tape.value(s);
        for j in 0..3 {
            assert!((v.get2(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((v.get2(1, 0) - 1.0).abs() < 1e-12);
        assert!(v.get2(1, 1).abs() < 1e-12);
        let row_sum: f64 = (0..3).map(|j| v.get2(0, j)).sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv1d_kernel1_is_per_frame_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(vec![4, 3, 1], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new(Mode::Infer);
        let xi = tape.constant(x.clone());
        let wi = tape.constant(w.clone());
        let bi = tape.constant(Tensor::zeros(&[4]));
        let conv = tape.conv1d(xi, wi, bi);

        // Same thing as x . W^T with W read as [C_out, C_in].
        let wt = Tensor::new(vec![4, 3], w.data().to_vec()).unwrap();
        let wt_id = tape.constant(wt);
        let wt_t = tape.transpose(wt_id);
        let mm = tape.matmul(xi, wt_t);
        for (a, b) in tape.value(conv).data().iter().zip(tape.value(mm).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_averaging_kernel_on_constant_input() {
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.constant(Tensor::filled(&[9, 1], 2.0));
        let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0 / 3.0; 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv1d(x, w, b);
        // Interior frames see the full kernel; borders see zero padding.
        for t in 1..8 {
            assert!((tape.value(y).data()[t] - 2.0).abs() < 1e-12);
        }
        assert!((tape.value(y).data()[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "kernel size must be odd")]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.constant(Tensor::zeros(&[4, 2]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 4]));
        let b = tape.constant(Tensor::zeros(&[2]));
        tape.conv1d(x, w, b);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.constant(t(&[vec![1.0, 1.0, 1.0, 1.0]]));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b);
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.constant(t(&[vec![-1.0, 1.0]]));
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b);
        // Hand value with eps = 1e-6: 1/sqrt(1 + 1e-6).
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((tape.value(y).get2(0, 1) - expect).abs() < 1e-15);
        assert!((tape.value(y).get2(0, 1) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
        let s = tape.sum(x);
        tape.backward(s);
        assert_eq!(tape.grad(x), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_mean_abs_positive_input() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0, 4.0]]), true);
        let a = tape.abs(x);
        let m = tape.mean(a);
        tape.backward(m);
        for g in tape.grad(x) {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_grad_stays_zero() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::filled(&[3], 2.0), true);
        let y = tape.leaf(Tensor::filled(&[3], 5.0), true);
        let s = tape.sum(x);
        tape.backward(s);
        assert_eq!(tape.grad(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_accumulation_is_linear() {
        // backward of (f + g) equals backward of f plus backward of g.
        let run = |combine: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new(Mode::Train);
            let x = tape.leaf(t(&[vec![0.3, -0.7], vec![0.1, 0.9]]), true);
            let th = tape.tanh(x);
            let f = tape.sum(th);
            let sq = tape.mul(x, x);
            let g = tape.mean(sq);
            if combine {
                let total = tape.add(f, g);
                tape.backward(total);
                (tape.grad(x).to_vec(), vec![])
            } else {
                tape.backward(f);
                let gf = tape.grad(x).to_vec();
                tape.backward(g);
                (gf, tape.grad(x).to_vec())
            }
        };
        let (combined, _) = run(true);
        let (gf, gg) = run(false);
        for i in 0..4 {
            assert!((combined[i] - (gf[i] + gg[i])).abs() < 1e-15);
        }
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        tape.backward(x);
    }

    #[test]
    fn dropout_infer_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new(Mode::Infer);
        let x = tape.constant(Tensor::filled(&[100], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng);
        assert_eq!(x, y);

        let mut tape = Tape::new(Mode::Train);
        let x = tape.constant(Tensor::filled(&[10000], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng);
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 10000.0;
        assert!((mean - 1.0).abs() < 0.05);
        for v in tape.value(y).data() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_backward_deterministic_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut tape = Tape::new(Mode::Train);
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tape.leaf(Tensor::new(vec![3, 4], data).unwrap(), true);
            let d = tape.dropout(x, 0.3, &mut rng);
            let th = tape.tanh(d);
            let loss = tape.mean(th);
            tape.backward(loss);
            (
                tape.scalar_value(loss).to_bits(),
                tape.grad(x).iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn max_pool_and_mean_rows() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 7.0], vec![4.0, 1.0]]), true);
        let p = tape.max_pool_rows2(x);
        assert_eq!(tape.value(p).data(), &[3.0, 5.0, 4.0, 7.0]);
        let m = tape.mean_rows(p);
        assert_eq!(tape.value(m).data(), &[3.5, 6.0]);
        let s = tape.sum(m);
        tape.backward(s);
        // Gradient routes through the argmax entries only.
        assert_eq!(tape.grad(x), &[0.0, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn gather_and_concat_cols_round_trip() {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.leaf(t(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]), true);
        let left = tape.slice_cols(x, 0, 1);
        let right = tape.slice_cols(x, 1, 3);
        let back = tape.concat_cols(&[left, right]);
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let picked = tape.gather_cols(x, &[2, 0]);
        assert_eq!(tape.value(picked).data(), &[3.0, 1.0, 6.0, 4.0]);
    }
}
