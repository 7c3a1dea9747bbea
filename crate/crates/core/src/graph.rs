//! Minimal reverse-mode autodiff over dense 2-D `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes record the op that
//! produced them plus whatever forward intermediates the backward rule needs.
//! Nodes that do not depend on any gradient-requiring leaf are skipped during
//! the backward sweep, so frozen sub-networks cost a forward pass only.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3x3 (or general k x k) strided convolution on a
/// channel-major `(C, H*W)` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    AdaptivePool {
        x: Var,
        windows: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Tensor,
    },
    MeanCols(Var),
    SoftmaxXent {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Tensor,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, as returned by [`Graph::backward`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `[floor(i*T/n), ceil((i+1)*T/n))` for every output row `i`.
pub fn pool_windows(len: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| {
            let start = i * len / out_len;
            let end = ((i + 1) * len).div_ceil(out_len);
            (start, end)
        })
        .collect()
}

pub(crate) fn adaptive_pool_forward(x: ArrayView2<f64>, windows: &[(usize, usize)]) -> Tensor {
    let mut out = Tensor::zeros((windows.len(), x.ncols()));
    for (i, &(a, b)) in windows.iter().enumerate() {
        let mean = x
            .slice(s![a..b, ..])
            .mean_axis(Axis(0))
            .expect("non-empty window");
        out.row_mut(i).assign(&mean);
    }
    out
}

/// Row-wise layer norm. Returns output, normalised input and 1/std per row.
pub(crate) fn layer_norm_forward(
    x: ArrayView2<f64>,
    gain: ArrayView2<f64>,
    bias: ArrayView2<f64>,
    eps: f64,
) -> (Tensor, Tensor, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd.push(r);
    }
    let y = &xhat * &gain.row(0) + bias.row(0);
    (y, xhat, rstd)
}

pub(crate) fn softmax_rows_inplace(m: &mut Tensor) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention. Returns the output and per-head
/// attention probabilities.
pub(crate) fn attention_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    causal: bool,
) -> (Tensor, Vec<Tensor>) {
    let (lq, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // Causal offset lets a query block attend to a longer cached key prefix.
    let offset = k.nrows() - lq;
    let mut out = Tensor::zeros((lq, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if causal {
            for i in 0..lq {
                for j in (i + offset + 1)..k.nrows() {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows_inplace(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

fn im2col(x: ArrayView2<f64>, g: &ConvGeom) -> Tensor {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = Tensor::zeros((g.in_ch * k * k, oh * ow));
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        cols[[r, oy * ow + ox]] = x[[c, iy as usize * g.width + ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Tensor, g: &ConvGeom) -> Tensor {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = Tensor::zeros((g.in_ch, g.height * g.width));
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x[[c, iy as usize * g.width + ix as usize]] += cols[[r, oy * ow + ox]];
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + &self.value(row).row(0);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let value = Tensor::from_shape_vec(shape, flat).expect("reshape preserves element count");
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (y, xhat, rstd) = layer_norm_forward(
            self.value(x).view(),
            self.value(gain).view(),
            self.value(bias).view(),
            eps,
        );
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Adaptive average pooling along rows (time) to `out_len` rows.
    pub fn adaptive_pool(&mut self, x: Var, out_len: usize) -> Var {
        let windows = pool_windows(self.value(x).nrows(), out_len);
        let value = adaptive_pool_forward(self.value(x).view(), &windows);
        let rg = self.rg(&[x]);
        self.push(value, Op::AdaptivePool { x, windows }, rg)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (value, probs) = attention_forward(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
            causal,
        );
        let rg = self.rg(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = self.value(table).select(Axis(0), ids);
        let rg = self.rg(&[table]);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Convolution on a `(in_ch, H*W)` map with weight `(out_ch, in_ch*k*k)`
    /// and bias `(out_ch, 1)`. Output is `(out_ch, H'*W')`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let cols = im2col(self.value(x).view(), &geom);
        let value = self.value(w).dot(&cols) + self.value(b);
        let rg = self.rg(&[x, w, b]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Column mean of a `(C, N)` map, returned as a `1 x C` row.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let m = self.value(x).mean_axis(Axis(1)).expect("non-empty");
        let value = m.insert_axis(Axis(0));
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanCols(x), rg)
    }

    /// Mean cross-entropy of softmax over the listed `(row, target)` pairs.
    pub fn softmax_xent(&mut self, logits: Var, rows: &[(usize, usize)]) -> Var {
        assert!(!rows.is_empty(), "cross-entropy over zero rows");
        let src = self.value(logits);
        let mut probs = Tensor::zeros((rows.len(), src.ncols()));
        for (i, &(r, _)) in rows.iter().enumerate() {
            probs.row_mut(i).assign(&src.row(r));
        }
        softmax_rows_inplace(&mut probs);
        let loss = rows
            .iter()
            .enumerate()
            .map(|(i, &(r, t))| {
                // log-softmax from the raw row for accuracy at large margins
                let row = src.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let _ = i;
                lse - row[t]
            })
            .sum::<f64>()
            / rows.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                rows: rows.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over classes of `w_k * BCE(sigmoid(x_k), y_k)` for a `1 x n` row
    /// of logits, in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let x = self.value(logits);
        let n = x.ncols();
        let loss = (0..n)
            .map(|k| {
                let z = x[[0, k]];
                weights[k] * (z.max(0.0) - z * targets[k] + (-z.abs()).exp().ln_1p())
            })
            .sum::<f64>()
            / n as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::from_elem((1, 1), loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `root` (seeded with gradient 1).
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_grad(x));
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                self.acc(
                    grads,
                    *a,
                    Tensor::from_shape_vec(shape, flat).expect("same size"),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                if self.wants(*gain) {
                    self.acc(
                        grads,
                        *gain,
                        (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                }
                if self.wants(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*x) {
                    let dxhat = g * &self.value(*gain).row(0);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Tensor::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dh_xh = dh.dot(&xh) / d;
                        let mut out = dx.row_mut(r);
                        for c in 0..dh.len() {
                            out[c] = rstd[r] * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::AdaptivePool { x, windows } => {
                let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                for (i, &(a, b)) in windows.iter().enumerate() {
                    let share = &g.row(i) / (b - a) as f64;
                    for t in a..b {
                        let mut row = dx.row_mut(t);
                        row += &share;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(qv.raw_dim());
                let mut dk = Tensor::zeros(kv.raw_dim());
                let mut dv = Tensor::zeros(vv.raw_dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let go = g.slice(cols);
                    let dp = go.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&go));
                    let mut ds = p * &dp;
                    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f64 = row.sum();
                        Zip::from(&mut row)
                            .and(&prow)
                            .for_each(|x, &pp| *x -= pp * dot);
                    }
                    dq.slice_mut(cols)
                        .assign(&(ds.dot(&kv.slice(cols)) * scale));
                    dk.slice_mut(cols)
                        .assign(&(ds.t().dot(&qv.slice(cols)) * scale));
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.wants(*p) {
                        self.acc(grads, *p, g.slice(s![at..at + n, ..]).to_owned());
                    }
                    at += n;
                }
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).raw_dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g.row(i);
                }
                self.acc(grads, *table, dt);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                if self.wants(*w) {
                    self.acc(grads, *w, g.dot(&cols.t()));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                if self.wants(*x) {
                    let dcols = self.value(*w).t().dot(g);
                    self.acc(grads, *x, col2im(&dcols, geom));
                }
            }
            Op::MeanCols(x) => {
                let (c, n) = self.value(*x).dim();
                let mut dx = Tensor::zeros((c, n));
                for ci in 0..c {
                    dx.row_mut(ci).fill(g[[0, ci]] / n as f64);
                }
                self.acc(grads, *x, dx);
            }
            Op::SoftmaxXent {
                logits,
                rows,
                probs,
            } => {
                let scale = g[[0, 0]] / rows.len() as f64;
                let mut dl = Tensor::zeros(self.value(*logits).raw_dim());
                for (i, &(r, t)) in rows.iter().enumerate() {
                    let mut row = dl.row_mut(r);
                    row.scaled_add(scale, &probs.row(i));
                    row[t] -= scale;
                }
                self.acc(grads, *logits, dl);
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let x = self.value(*logits);
                let n = x.ncols() as f64;
                let mut dl = Tensor::zeros(x.raw_dim());
                for k in 0..x.ncols() {
                    let sig = 1.0 / (1.0 + (-x[[0, k]]).exp());
                    dl[[0, k]] = g[[0, 0]] * weights[k] * (sig - targets[k]) / n;
                }
                self.acc(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: (usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Compares analytic gradients of `f` w.r.t. each input against central
    /// differences at up to `per_input` randomly chosen coordinates. Returns
    /// the worst relative error.
    pub fn check<F>(inputs: &[Tensor], f: F, per_input: usize, seed: u64) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<_> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.raw_dim()));
            for _ in 0..per_input.min(t.len()) {
                let r = rng.random_range(0..t.nrows());
                let c = rng.random_range(0..t.ncols());
                let mut plus = inputs.to_vec();
                plus[i][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[i][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }
}
