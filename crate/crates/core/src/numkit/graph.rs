//! Reverse-mode differentiation over a recorded op list.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every op applied to it.
//! In [`Mode::Train`] the ops keep what their backward rules need and
//! [`Graph::backward`] walks the list in exact reverse order. In
//! [`Mode::Eval`] the same forward code runs without saving anything.
//!
//! Feature maps use `[H, W, C]` layout; a map doubles as an `(H·W) × C`
//! token matrix for attention without copying.

use crate::error::{ensure, Error, Result};
use crate::numkit::gemm;
use crate::numkit::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !self.names.contains(&name),
            Contract,
            "parameter {name} registered twice"
        );
        value.ensure_finite(&name)?;
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes and raw bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (_, name, t) in self.iter() {
            feed(name.as_bytes());
            for d in t.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-parameter gradients, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn new(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other · scale`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f32) -> Result<()> {
        ensure!(
            self.grads.len() == other.grads.len(),
            Dimension,
            "gradient sets of different sizes"
        );
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.ensure_shape(b, "accumulate")?;
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y * scale;
            }
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for g in &self.grads {
            g.ensure_finite("gradient")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow { a: Var, row: Var },
    Silu(Var),
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f32> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f32, f32)> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatRows(Var, Var),
    Embedding { table: Var, index: usize },
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    Mse { pred: Var, target: Tensor },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Op recorder with a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
}

const GN_EPS: f32 = 1e-5;

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<Var> {
        value.ensure_finite(context)?;
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, "constant")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(id.0 < self.params.len(), "unknown parameter {id:?}");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn matrix(&self, v: Var, context: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        ensure!(t.rank() >= 2, Dimension, "{context}: rank-{} operand", t.rank());
        Ok(t.as_matrix())
    }

    /// `a · b` treating leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        ensure!(k == k2, Dimension, "matmul inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, 0.0);
        let op = Op::MatMul { a, b, trans_b: false };
        self.push(op, Tensor::from_parts(vec![m, n], out), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        ensure!(k == k2, Dimension, "matmul_nt inner dimensions {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm::gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, 0.0);
        let op = Op::MatMul { a, b, trans_b: true };
        self.push(op, Tensor::from_parts(vec![m, n], out), "matmul_nt")
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.ensure_shape(tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let t = self.value(a).scale(s);
        self.push(Op::Scale(a, s), t, "scale")
    }

    /// Adds a length-`n` row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).as_matrix();
        ensure!(
            self.value(row).len() == n,
            Dimension,
            "row of length {} added to {n} columns",
            self.value(row).len()
        );
        let r = self.value(row).data();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        let shape = ta.shape().to_vec();
        self.push(Op::AddRow { a, row }, Tensor::from_parts(shape, data), "add_row")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(Op::Silu(a), t, "silu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).softmax_rows()?;
        self.push(Op::SoftmaxRows(a), t, "softmax_rows")
    }

    /// 2D convolution over an `[H, W, Cin]` map. `w` is `[k·k·Cin, Cout]`
    /// with patch order `(ky, kx, cin)`, `b` has `Cout` entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (h, wd, cin) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::Dimension(format!("conv2d input shape {s:?}"))),
        };
        let (rows, cout) = self.matrix(w, "conv2d weight")?;
        ensure!(rows == k * k * cin, Dimension, "conv2d weight has {rows} rows, expected {}", k * k * cin);
        ensure!(self.value(b).len() == cout, Dimension, "conv2d bias length");
        ensure!(h + 2 * pad >= k && wd + 2 * pad >= k && stride > 0, Dimension, "conv2d geometry");
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let m = geom.ho * geom.wo;
        let mut out = vec![0.0; m * cout];
        for chunk in out.chunks_mut(cout) {
            chunk.copy_from_slice(self.value(b).data());
        }
        gemm::gemm_nn(m, geom.patch(), cout, &cols, self.value(w).data(), &mut out, 1.0);
        let saved = if self.training() { cols } else { Vec::new() };
        let value = Tensor::from_parts(vec![geom.ho, geom.wo, cout], out);
        self.push(Op::Conv2d { x, w, b, geom, cols: saved }, value, "conv2d")
    }

    /// Group normalization over an `[H, W, C]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (_, c) = self.value(x).as_matrix();
        ensure!(groups > 0 && c % groups == 0, Dimension, "{c} channels in {groups} groups");
        ensure!(self.value(gamma).len() == c && self.value(beta).len() == c, Dimension, "group_norm affine length");
        let xd = self.value(x).data();
        let (g_, b_) = (self.value(gamma).data(), self.value(beta).data());
        let cg = c / groups;
        let mut stats = Vec::with_capacity(groups);
        let mut out = vec![0.0; xd.len()];
        for g in 0..groups {
            let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
            for row in xd.chunks(c) {
                for &v in &row[g * cg..(g + 1) * cg] {
                    s += f64::from(v);
                    s2 += f64::from(v) * f64::from(v);
                    n += 1;
                }
            }
            let mean = s / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            let rstd = 1.0 / (var + f64::from(GN_EPS)).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            for (orow, row) in out.chunks_mut(c).zip(xd.chunks(c)) {
                for ch in g * cg..(g + 1) * cg {
                    orow[ch] = (row[ch] - mean) * rstd * g_[ch] + b_[ch];
                }
            }
            stats.push((mean, rstd));
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::GroupNorm { x, gamma, beta, groups, stats },
            Tensor::from_parts(shape, out),
            "group_norm",
        )
    }

    /// Nearest-neighbour 2× upsampling of an `[H, W, C]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(Error::Dimension(format!("upsample input shape {s:?}"))),
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                let src = ((oy / 2) * w + ox / 2) * c;
                let dst = (oy * 2 * w + ox) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.push(Op::Upsample2x(x), Tensor::from_parts(vec![2 * h, 2 * w, c], out), "upsample")
    }

    /// Concatenates two maps (or matrices) with equal leading shape along the last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1],
            Dimension,
            "concat_channels {sa:?} with {sb:?}"
        );
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = da.len() / ca.max(1);
        let mut out = Vec::with_capacity(da.len() + db.len());
        for r in 0..rows {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        self.push(Op::ConcatChannels(a, b), Tensor::from_parts(shape, out), "concat_channels")
    }

    /// Stacks two matrices along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.matrix(a, "concat_rows")?;
        let (mb, nb) = self.matrix(b, "concat_rows")?;
        ensure!(na == nb, Dimension, "concat_rows column mismatch {na} vs {nb}");
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        self.push(Op::ConcatRows(a, b), Tensor::from_parts(vec![ma + mb, na], out), "concat_rows")
    }

    /// Row `index` of a `[N, E]` table as a `[1, E]` matrix.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        let (n, e) = self.matrix(table, "embedding")?;
        ensure!(index < n, Lookup, "embedding index {index} outside table of {n} rows");
        let row = self.value(table).data()[index * e..(index + 1) * e].to_vec();
        self.push(Op::Embedding { table, index }, Tensor::from_parts(vec![1, e], row), "embedding")
    }

    /// Column means of a matrix (or of a map's token rows) as `[1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix();
        ensure!(m > 0, Dimension, "mean_rows of empty matrix");
        let mut out = vec![0.0f32; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(a), Tensor::from_parts(vec![1, n], out), "mean_rows")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(a), t, "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum() as f32;
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        ensure!(
            p.len() == target.len() && !p.is_empty(),
            Dimension,
            "mse of {:?} against {:?}",
            p.shape(),
            target.shape()
        );
        let s: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| f64::from(a - b) * f64::from(a - b))
            .sum();
        let value = Tensor::scalar((s / p.len() as f64) as f32);
        self.push(Op::Mse { pred, target: target.clone() }, value, "mse")
    }

    /// Gradients of a scalar `loss` with respect to every parameter.
    /// Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(self.training(), Contract, "backward on a graph recorded in eval mode");
        ensure!(
            self.value(loss).len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (a, b) in out.grads[id.0].data_mut().iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = self.value(*a).as_matrix();
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    if !*trans_b {
                        let n = self.value(*b).as_matrix().1;
                        let mut ga = vec![0.0; m * k];
                        gemm::gemm_nt(m, n, k, &gy, bd, &mut ga, 0.0);
                        let mut gb = vec![0.0; k * n];
                        gemm::gemm_tn(k, m, n, ad, &gy, &mut gb, 0.0);
                        accum(&mut grads, *a, ga);
                        accum(&mut grads, *b, gb);
                    } else {
                        let n = self.value(*b).as_matrix().0;
                        let mut ga = vec![0.0; m * k];
                        gemm::gemm_nn(m, n, k, &gy, bd, &mut ga, 0.0);
                        let mut gb = vec![0.0; n * k];
                        gemm::gemm_tn(n, m, k, &gy, ad, &mut gb, 0.0);
                        accum(&mut grads, *a, ga);
                        accum(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, gy.clone());
                    accum(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, gy.iter().map(|v| -v).collect());
                    accum(&mut grads, *a, gy);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    accum(&mut grads, *a, gy.iter().zip(bd).map(|(g, y)| g * y).collect());
                    accum(&mut grads, *b, gy.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, s) => accum(&mut grads, *a, gy.iter().map(|g| g * s).collect()),
                Op::AddRow { a, row } => {
                    let n = self.value(*row).len();
                    let mut gr = vec![0.0; n];
                    for chunk in gy.chunks(n) {
                        for (o, g) in gr.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    accum(&mut grads, *row, gr);
                    accum(&mut grads, *a, gy);
                }
                Op::Silu(a) => {
                    let xd = self.value(*a).data();
                    let g = gy
                        .iter()
                        .zip(xd)
                        .map(|(g, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accum(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let (_, n) = y.as_matrix();
                    let mut g = vec![0.0; gy.len()];
                    for ((grow, yrow), out) in gy.chunks(n).zip(y.data().chunks(n)).zip(g.chunks_mut(n)) {
                        let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum(&mut grads, *a, g);
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let m = geom.ho * geom.wo;
                    let p = geom.patch();
                    let mut gb = vec![0.0; geom.cout];
                    for chunk in gy.chunks(geom.cout) {
                        for (o, g) in gb.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    let mut gw = vec![0.0; p * geom.cout];
                    gemm::gemm_tn(p, m, geom.cout, cols, &gy, &mut gw, 0.0);
                    let mut gcols = vec![0.0; m * p];
                    gemm::gemm_nt(m, geom.cout, p, &gy, self.value(*w).data(), &mut gcols, 0.0);
                    accum(&mut grads, *b, gb);
                    accum(&mut grads, *w, gw);
                    accum(&mut grads, *x, col2im(&gcols, geom));
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let xd = self.value(*x).data();
                    let gd = self.value(*gamma).data();
                    let c = gd.len();
                    let cg = c / groups;
                    let rows = xd.len() / c;
                    let mut gx = vec![0.0; xd.len()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    for (g, &(mean, rstd)) in stats.iter().enumerate() {
                        let n = (rows * cg) as f32;
                        let (mut sum_d, mut sum_dx) = (0.0f32, 0.0f32);
                        for r in 0..rows {
                            for ch in g * cg..(g + 1) * cg {
                                let i = r * c + ch;
                                let xhat = (xd[i] - mean) * rstd;
                                ggamma[ch] += gy[i] * xhat;
                                gbeta[ch] += gy[i];
                                let d = gy[i] * gd[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                            }
                        }
                        let (md, mdx) = (sum_d / n, sum_dx / n);
                        for r in 0..rows {
                            for ch in g * cg..(g + 1) * cg {
                                let i = r * c + ch;
                                let xhat = (xd[i] - mean) * rstd;
                                gx[i] = rstd * (gy[i] * gd[ch] - md - xhat * mdx);
                            }
                        }
                    }
                    accum(&mut grads, *gamma, ggamma);
                    accum(&mut grads, *beta, gbeta);
                    accum(&mut grads, *x, gx);
                }
                Op::Upsample2x(x) => {
                    let (h, w, c) = match self.shape(*x) {
                        &[h, w, c] => (h, w, c),
                        _ => unreachable!(),
                    };
                    let mut g = vec![0.0; h * w * c];
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            let dst = ((oy / 2) * w + ox / 2) * c;
                            let src = (oy * 2 * w + ox) * c;
                            for ch in 0..c {
                                g[dst + ch] += gy[src + ch];
                            }
                        }
                    }
                    accum(&mut grads, *x, g);
                }
                Op::ConcatChannels(a, b) => {
                    let ca = *self.shape(*a).last().unwrap();
                    let cb = *self.shape(*b).last().unwrap();
                    let rows = gy.len() / (ca + cb);
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for row in gy.chunks(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let la = self.value(*a).len();
                    accum(&mut grads, *b, gy[la..].to_vec());
                    accum(&mut grads, *a, gy[..la].to_vec());
                }
                Op::Embedding { table, index } => {
                    let t = self.value(*table);
                    let e = t.as_matrix().1;
                    let mut g = vec![0.0; t.len()];
                    g[index * e..(index + 1) * e].copy_from_slice(&gy);
                    accum(&mut grads, *table, g);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).as_matrix();
                    let inv = 1.0 / m as f32;
                    let mut g = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        g.extend(gy.iter().map(|v| v * inv));
                    }
                    accum(&mut grads, *a, g);
                }
                Op::Reshape(a) => accum(&mut grads, *a, gy),
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accum(&mut grads, *a, vec![gy[0]; n]);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let scale = 2.0 * gy[0] / p.len() as f32;
                    let g = p.iter().zip(target.data()).map(|(a, b)| (a - b) * scale).collect();
                    accum(&mut grads, *pred, g);
                }
            }
        }
        out.ensure_finite()?;
        Ok(out)
    }
}

fn accum(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.patch();
    let mut cols = vec![0.0; g.ho * g.wo * p];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * p..(oy * g.wo + ox + 1) * p];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.patch();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * p..(oy * g.wo + ox + 1) * p];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}
