//! Reverse-mode tape. Every operation appends one node holding its output
//! and whatever it needs for the backward pass; `backward` walks the nodes
//! once in reverse order.
//!
//! Matrices are row-major `[rows, cols]`. Sequence tensors are stored as
//! `[batch * time, channels]` with time varying fastest across rows, and the
//! ops that care about time (`causal_conv1d`, `scan`) take `batch` and `time`
//! explicitly.

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied operation.
pub trait CustomBackward<T: Scalar> {
    /// Gradient with respect to each input, in input order.
    fn backward(&self, grad_out: &[T], inputs: &[&Tensor<T>], output: &Tensor<T>) -> Vec<Vec<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Exp { a: Var },
    Softplus { a: Var },
    Silu { a: Var },
    Sigmoid { a: Var },
    RmsNorm { x: Var, w: Var, inv: Vec<T> },
    CausalConv { x: Var, w: Var, bias: Var, batch: usize, time: usize, width: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Scan { a: Var, u: Var, batch: usize, time: usize },
    SelectiveScan { decay: Var, x: Var, b: Var, c: Var, batch: usize, time: usize, states: Vec<T> },
    OuterRows { x: Var, b: Var },
    RepeatCols { a: Var, k: usize },
    ContractRows { h: Var, c: Var },
    SliceCols { a: Var, start: usize },
    MaskedCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<i64>, mask: i64, count: usize },
    Sum { a: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when nothing reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Like `get` but returns zeros when no gradient reached `v`.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::from_f64(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that takes no part in differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), NumericsError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(shape_err(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul: inner dims {k} vs {k2}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == T::zero() {
                    continue;
                }
                for (o, &y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    fn row_len_check(&self, a: Var, row: Var, what: &str) -> Result<usize, NumericsError> {
        let c = self.value(a).last_dim();
        if self.value(row).len() != c {
            return Err(shape_err(format!(
                "{what}: row of {} elements against trailing dim {c}",
                self.value(row).len()
            )));
        }
        Ok(c)
    }

    /// Adds a vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let c = self.row_len_check(a, row, "add_row")?;
        let r = self.value(row).data();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x + r[i % c]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow { a, row }, &[a, row]))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let c = self.row_len_check(a, row, "mul_row")?;
        let r = self.value(row).data();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * r[i % c]).collect();
        let v = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale { a, c }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.exp());
        self.push(v, Op::Exp { a }, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.map(a, softplus);
        self.push(v, Op::Softplus { a }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid { a }, &[a])
    }

    /// `x / rms(x) * w` over the trailing dimension.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var, NumericsError> {
        let c = self.row_len_check(x, w, "rmsnorm")?;
        let xv = self.value(x);
        let wv = self.value(w).data();
        let rows = xv.rows();
        let mut inv = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        let denom = T::from_f64(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / denom;
            let s = T::one() / (ms + eps).sqrt();
            inv.push(s);
            for j in 0..c {
                out[r * c + j] = row[j] * s * wv[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { x, w, inv }, &[x, w]))
    }

    /// Depthwise causal convolution over time.
    ///
    /// `x` is `[batch * time, channels]`, `w` is `[channels, width]` with the
    /// last tap applied to the current step, `bias` has `channels` entries.
    pub fn causal_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        batch: usize,
        time: usize,
    ) -> Result<Var, NumericsError> {
        let (rows, ch) = self.dims2(x, "conv input")?;
        let (wc, width) = self.dims2(w, "conv kernel")?;
        if rows != batch * time || wc != ch || self.value(bias).len() != ch {
            return Err(shape_err(format!(
                "conv: input [{rows}, {ch}], kernel [{wc}, {width}], bias {} for batch {batch} x time {time}",
                self.value(bias).len()
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); rows * ch];
        for b in 0..batch {
            for t in 0..time {
                let o = &mut out[(b * time + t) * ch..(b * time + t + 1) * ch];
                o.copy_from_slice(bv);
                for j in 0..width {
                    let lag = width - 1 - j;
                    if lag > t {
                        continue;
                    }
                    let src = &xv[(b * time + t - lag) * ch..(b * time + t - lag + 1) * ch];
                    for c in 0..ch {
                        o[c] = o[c] + wv[c * width + j] * src[c];
                    }
                }
            }
        }
        let v = Tensor::new(vec![rows, ch], out)?;
        Ok(self.push(v, Op::CausalConv { x, w, bias, batch, time, width }, &[x, w, bias]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (vocab, dim) = self.dims2(table, "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::IndexOutOfRange { index: bad, size: vocab });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let v = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Linear recurrence `h_t = a_t * h_{t-1} + u_t` with `h_{-1} = 0`,
    /// elementwise over the trailing dimension; `a` and `u` are
    /// `[batch * time, width]`.
    pub fn scan(&mut self, a: Var, u: Var, batch: usize, time: usize) -> Result<Var, NumericsError> {
        self.same_shape(a, u, "scan")?;
        let av = self.value(a);
        let width = av.last_dim();
        if av.rows() != batch * time {
            return Err(shape_err(format!("scan: {} rows for batch {batch} x time {time}", av.rows())));
        }
        let ad = av.data();
        let ud = self.value(u).data();
        let mut out = vec![T::zero(); ad.len()];
        for b in 0..batch {
            let base = b * time * width;
            out[base..base + width].copy_from_slice(&ud[base..base + width]);
            for t in 1..time {
                let cur = base + t * width;
                let (prev, rest) = out.split_at_mut(cur);
                let prev = &prev[cur - width..];
                for j in 0..width {
                    rest[j] = ad[cur + j] * prev[j] + ud[cur + j];
                }
            }
        }
        let v = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Scan { a, u, batch, time }, &[a, u]))
    }

    /// Fused per-head selective scan. With `x` `[R, H * P]`, `decay` `[R, H]`
    /// and `b`, `c` `[R, N]` (rows are `batch * time`), keeps a `[H * P, N]`
    /// state per sequence:
    ///
    /// `h_t[i, n] = decay_t[i / P] * h_{t-1}[i, n] + x_t[i] * b_t[n]`, `y_t[i] = sum_n h_t[i, n] * c_t[n]`.
    ///
    /// Computes the same values as `repeat_cols`, `outer_rows`, `scan` and
    /// `contract_rows` in sequence without materializing the intermediates.
    pub fn selective_scan(
        &mut self,
        decay: Var,
        x: Var,
        b: Var,
        c: Var,
        batch: usize,
        time: usize,
    ) -> Result<Var, NumericsError> {
        let (r, heads) = self.dims2(decay, "selective_scan decay")?;
        let (rx, width) = self.dims2(x, "selective_scan x")?;
        let (rb, n) = self.dims2(b, "selective_scan b")?;
        let (rc, nc) = self.dims2(c, "selective_scan c")?;
        if r != batch * time || rx != r || rb != r || rc != r || nc != n {
            return Err(shape_err(format!(
                "selective_scan: rows {r}/{rx}/{rb}/{rc} and state {n}/{nc} for batch {batch} x time {time}"
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(shape_err(format!("selective_scan: width {width} not divisible into {heads} heads")));
        }
        let p = width / heads;
        let (dv, xv, bv, cv) = (self.value(decay).data(), self.value(x).data(), self.value(b).data(), self.value(c).data());
        let block = width * n;
        let mut states = vec![T::zero(); r * block];
        let mut y = vec![T::zero(); r * width];
        for s in 0..batch {
            for t in 0..time {
                let row = s * time + t;
                let (prev, cur) = states.split_at_mut(row * block);
                let cur = &mut cur[..block];
                let br = &bv[row * n..(row + 1) * n];
                let cr = &cv[row * n..(row + 1) * n];
                for i in 0..width {
                    let a = dv[row * heads + i / p];
                    let xi = xv[row * width + i];
                    let hi = &mut cur[i * n..(i + 1) * n];
                    if t == 0 {
                        hi.iter_mut().zip(br).for_each(|(h, &bj)| *h = xi * bj);
                    } else {
                        let hp = &prev[(row - 1) * block + i * n..(row - 1) * block + (i + 1) * n];
                        for ((h, &old), &bj) in hi.iter_mut().zip(hp).zip(br) {
                            *h = a * old + xi * bj;
                        }
                    }
                    y[row * width + i] = hi.iter().zip(cr).map(|(&h, &cj)| h * cj).sum();
                }
            }
        }
        let v = Tensor::new(vec![r, width], y)?;
        Ok(self.push(v, Op::SelectiveScan { decay, x, b, c, batch, time, states }, &[decay, x, b, c]))
    }

    /// Row-wise outer product: `[R, M] x [R, N] -> [R, M * N]`.
    pub fn outer_rows(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, m) = self.dims2(x, "outer lhs")?;
        let (r2, n) = self.dims2(b, "outer rhs")?;
        if r != r2 {
            return Err(shape_err(format!("outer_rows: {r} vs {r2} rows")));
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * m * n);
        for row in 0..r {
            let br = &bv[row * n..(row + 1) * n];
            for &xi in &xv[row * m..(row + 1) * m] {
                out.extend(br.iter().map(|&bj| xi * bj));
            }
        }
        let v = Tensor::new(vec![r, m * n], out)?;
        Ok(self.push(v, Op::OuterRows { x, b }, &[x, b]))
    }

    /// Repeats each element of the trailing dimension `k` times in place.
    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let mut shape = av.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() *= k;
        let data = av.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        let v = Tensor::new(shape, data).expect("repeat shape");
        self.push(v, Op::RepeatCols { a, k }, &[a])
    }

    /// `y[r, m] = sum_n h[r, m * N + n] * c[r, n]`.
    pub fn contract_rows(&mut self, h: Var, c: Var) -> Result<Var, NumericsError> {
        let (r, mn) = self.dims2(h, "contract lhs")?;
        let (r2, n) = self.dims2(c, "contract rhs")?;
        if r != r2 || n == 0 || mn % n != 0 {
            return Err(shape_err(format!("contract_rows: [{r}, {mn}] against [{r2}, {n}]")));
        }
        let m = mn / n;
        let hv = self.value(h).data();
        let cv = self.value(c).data();
        let mut out = Vec::with_capacity(r * m);
        for row in 0..r {
            let cr = &cv[row * n..(row + 1) * n];
            for i in 0..m {
                let hr = &hv[row * mn + i * n..row * mn + (i + 1) * n];
                out.push(hr.iter().zip(cr).map(|(&x, &y)| x * y).sum());
            }
        }
        let v = Tensor::new(vec![r, m], out)?;
        Ok(self.push(v, Op::ContractRows { h, c }, &[h, c]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (r, cols) = self.dims2(a, "slice")?;
        if start + len > cols {
            return Err(shape_err(format!("slice_cols: {start}+{len} exceeds {cols} columns")));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&av[row * cols + start..row * cols + start + len]);
        }
        let v = Tensor::new(vec![r, len], out)?;
        Ok(self.push(v, Op::SliceCols { a, start }, &[a]))
    }

    /// Mean negative log-likelihood over rows whose label is not `mask_value`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[i64],
        mask_value: i64,
    ) -> Result<Var, NumericsError> {
        let (r, v) = self.dims2(logits, "cross-entropy logits")?;
        if labels.len() != r {
            return Err(shape_err(format!("cross-entropy: {} labels for {r} rows", labels.len())));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, &label) in labels.iter().enumerate() {
            if label == mask_value {
                continue;
            }
            if label < 0 || label as usize >= v {
                return Err(NumericsError::IndexOutOfRange { index: label.max(0) as usize, size: v });
            }
            let lr = &lv[row * v..(row + 1) * v];
            let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = lr.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + lse - lr[label as usize];
            for j in 0..v {
                probs[row * v + j] = (lr[j] - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(NumericsError::NoSupervision);
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        Ok(self.push(
            value,
            Op::MaskedCrossEntropy { logits, probs, labels: labels.to_vec(), mask: mask_value, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Records an operation whose forward value and backward rule come from
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Reverse pass from a scalar. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.backward_done {
            return Err(NumericsError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Lazily allocated gradient buffer for an input that needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let br = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] = ga[r * k + p] + gr.iter().zip(br).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *o = *o + x * y;
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    acc(v, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x));
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * bv[j];
                    }
                });
                acc(b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] = gb[j] + g[j] * av[j];
                    }
                });
            }
            &Op::AddRow { a, row } => {
                let c = nodes[row.0].value.len();
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x));
                acc(row, &mut |gr| {
                    for (j, &x) in g.iter().enumerate() {
                        gr[j % c] = gr[j % c] + x;
                    }
                });
            }
            &Op::MulRow { a, row } => {
                let (av, rv) = (val(a), val(row));
                let c = rv.len();
                acc(a, &mut |ga| {
                    for (j, &x) in g.iter().enumerate() {
                        ga[j] = ga[j] + x * rv[j % c];
                    }
                });
                acc(row, &mut |gr| {
                    for (j, &x) in g.iter().enumerate() {
                        gr[j % c] = gr[j % c] + x * av[j];
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * c)),
            &Op::Exp { a } => acc(a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * out[j];
                }
            }),
            &Op::Softplus { a } => {
                let av = val(a);
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] = ga[j] + g[j] * sigmoid(av[j]);
                    }
                });
            }
            &Op::Silu { a } => {
                let av = val(a);
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        let s = sigmoid(av[j]);
                        ga[j] = ga[j] + g[j] * s * (T::one() + av[j] * (T::one() - s));
                    }
                });
            }
            &Op::Sigmoid { a } => acc(a, &mut |ga| {
                for j in 0..g.len() {
                    ga[j] = ga[j] + g[j] * out[j] * (T::one() - out[j]);
                }
            }),
            Op::RmsNorm { x, w, inv } => {
                let (xv, wv) = (val(*x), val(*w));
                let c = wv.len();
                let denom = T::from_f64(c as f64);
                acc(*w, &mut |gw| {
                    for (r, &s) in inv.iter().enumerate() {
                        for j in 0..c {
                            gw[j] = gw[j] + g[r * c + j] * xv[r * c + j] * s;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &s) in inv.iter().enumerate() {
                        let base = r * c;
                        // dot(dy * w, xhat) / C
                        let mut proj = T::zero();
                        for j in 0..c {
                            proj = proj + g[base + j] * wv[j] * xv[base + j] * s;
                        }
                        proj = proj / denom;
                        for j in 0..c {
                            let xhat = xv[base + j] * s;
                            gx[base + j] = gx[base + j] + s * (g[base + j] * wv[j] - xhat * proj);
                        }
                    }
                });
            }
            &Op::CausalConv { x, w, bias, batch, time, width } => {
                let (xv, wv) = (val(x), val(w));
                let ch = nodes[bias.0].value.len();
                acc(bias, &mut |gb| {
                    for (j, &v) in g.iter().enumerate() {
                        gb[j % ch] = gb[j % ch] + v;
                    }
                });
                acc(w, &mut |gw| {
                    for b in 0..batch {
                        for t in 0..time {
                            let go = &g[(b * time + t) * ch..(b * time + t + 1) * ch];
                            for j in 0..width {
                                let lag = width - 1 - j;
                                if lag > t {
                                    continue;
                                }
                                let src = &xv[(b * time + t - lag) * ch..(b * time + t - lag + 1) * ch];
                                for c in 0..ch {
                                    gw[c * width + j] = gw[c * width + j] + go[c] * src[c];
                                }
                            }
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for b in 0..batch {
                        for t in 0..time {
                            let go = &g[(b * time + t) * ch..(b * time + t + 1) * ch];
                            for j in 0..width {
                                let lag = width - 1 - j;
                                if lag > t {
                                    continue;
                                }
                                let dst = (b * time + t - lag) * ch;
                                for c in 0..ch {
                                    gx[dst + c] = gx[dst + c] + go[c] * wv[c * width + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            gt[id * dim + j] = gt[id * dim + j] + g[r * dim + j];
                        }
                    }
                });
            }
            Op::SelectiveScan { decay, x, b, c, batch, time, states } => {
                let (decay, x, b, c, batch, time) = (*decay, *x, *b, *c, *batch, *time);
                let (dv, xv, bv, cv) = (val(decay), val(x), val(b), val(c));
                let heads = nodes[decay.0].value.last_dim();
                let width = nodes[x.0].value.last_dim();
                let n = nodes[b.0].value.last_dim();
                let p = width / heads;
                let block = width * n;
                let rows = batch * time;
                let (mut gd, mut gx) = (vec![T::zero(); rows * heads], vec![T::zero(); rows * width]);
                let (mut gb, mut gc) = (vec![T::zero(); rows * n], vec![T::zero(); rows * n]);
                // adj holds dL/dh_t for the current step, including later steps.
                let mut adj = vec![T::zero(); block];
                for s in 0..batch {
                    adj.iter_mut().for_each(|v| *v = T::zero());
                    for t in (0..time).rev() {
                        let row = s * time + t;
                        let h = &states[row * block..(row + 1) * block];
                        let br = &bv[row * n..(row + 1) * n];
                        let cr = &cv[row * n..(row + 1) * n];
                        for i in 0..width {
                            let gy = g[row * width + i];
                            let ai = &mut adj[i * n..(i + 1) * n];
                            let hi = &h[i * n..(i + 1) * n];
                            for j in 0..n {
                                ai[j] = ai[j] + gy * cr[j];
                                gc[row * n + j] = gc[row * n + j] + gy * hi[j];
                            }
                            let xi = xv[row * width + i];
                            let mut sx = T::zero();
                            for j in 0..n {
                                sx = sx + ai[j] * br[j];
                                gb[row * n + j] = gb[row * n + j] + ai[j] * xi;
                            }
                            gx[row * width + i] = sx;
                            let head = i / p;
                            let a = dv[row * heads + head];
                            if t > 0 {
                                let hp = &states[(row - 1) * block + i * n..(row - 1) * block + (i + 1) * n];
                                let sd: T = ai.iter().zip(hp).map(|(&u, &v)| u * v).sum();
                                gd[row * heads + head] = gd[row * heads + head] + sd;
                            }
                            ai.iter_mut().for_each(|v| *v = *v * a);
                        }
                    }
                }
                for (v, buf) in [(decay, gd), (x, gx), (b, gb), (c, gc)] {
                    acc(v, &mut |slot| slot.iter_mut().zip(&buf).for_each(|(o, &d)| *o = *o + d));
                }
            }
            &Op::Scan { a, u, batch, time } => {
                let av = val(a);
                let width = nodes[a.0].value.last_dim();
                // carry[t] = dL/dh_t including contributions from later steps.
                let mut carry = g.to_vec();
                for b in 0..batch {
                    let base = b * time * width;
                    for t in (0..time.saturating_sub(1)).rev() {
                        let cur = base + t * width;
                        let next = cur + width;
                        for j in 0..width {
                            carry[cur + j] = carry[cur + j] + av[next + j] * carry[next + j];
                        }
                    }
                }
                acc(u, &mut |gu| gu.iter_mut().zip(&carry).for_each(|(o, &x)| *o = *o + x));
                acc(a, &mut |ga| {
                    for b in 0..batch {
                        let base = b * time * width;
                        for t in 1..time {
                            let cur = base + t * width;
                            for j in 0..width {
                                ga[cur + j] = ga[cur + j] + carry[cur + j] * out[cur - width + j];
                            }
                        }
                    }
                });
            }
            &Op::OuterRows { x, b } => {
                let (xv, bv) = (val(x), val(b));
                let n = nodes[b.0].value.last_dim();
                let m = nodes[x.0].value.last_dim();
                let rows = nodes[x.0].value.rows();
                acc(x, &mut |gx| {
                    for r in 0..rows {
                        let br = &bv[r * n..(r + 1) * n];
                        for i in 0..m {
                            let gr = &g[(r * m + i) * n..(r * m + i + 1) * n];
                            gx[r * m + i] = gx[r * m + i] + gr.iter().zip(br).map(|(&p, &q)| p * q).sum::<T>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..rows {
                        for i in 0..m {
                            let xi = xv[r * m + i];
                            let gr = &g[(r * m + i) * n..(r * m + i + 1) * n];
                            for (o, &p) in gb[r * n..(r + 1) * n].iter_mut().zip(gr) {
                                *o = *o + p * xi;
                            }
                        }
                    }
                });
            }
            &Op::RepeatCols { a, k } => acc(a, &mut |ga| {
                for (j, o) in ga.iter_mut().enumerate() {
                    *o = *o + g[j * k..(j + 1) * k].iter().copied().sum::<T>();
                }
            }),
            &Op::ContractRows { h, c } => {
                let (hv, cv) = (val(h), val(c));
                let n = nodes[c.0].value.last_dim();
                let rows = nodes[c.0].value.rows();
                let m = nodes[h.0].value.last_dim() / n;
                acc(h, &mut |gh| {
                    for r in 0..rows {
                        let cr = &cv[r * n..(r + 1) * n];
                        for i in 0..m {
                            let gv = g[r * m + i];
                            let dst = &mut gh[(r * m + i) * n..(r * m + i + 1) * n];
                            for (o, &q) in dst.iter_mut().zip(cr) {
                                *o = *o + gv * q;
                            }
                        }
                    }
                });
                acc(c, &mut |gc| {
                    for r in 0..rows {
                        for i in 0..m {
                            let gv = g[r * m + i];
                            let hr = &hv[(r * m + i) * n..(r * m + i + 1) * n];
                            for (o, &p) in gc[r * n..(r + 1) * n].iter_mut().zip(hr) {
                                *o = *o + gv * p;
                            }
                        }
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                let cols = nodes[a.0].value.last_dim();
                let len = nodes[i].value.last_dim();
                acc(a, &mut |ga| {
                    for (r, chunk) in g.chunks(len).enumerate() {
                        for (j, &x) in chunk.iter().enumerate() {
                            ga[r * cols + start + j] = ga[r * cols + start + j] + x;
                        }
                    }
                });
            }
            Op::MaskedCrossEntropy { logits, probs, labels, mask, count } => {
                let v = nodes[logits.0].value.last_dim();
                let scale = g[0] / T::from_f64(*count as f64);
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        if label == *mask {
                            continue;
                        }
                        for j in 0..v {
                            let target = if j as i64 == label { T::one() } else { T::zero() };
                            gl[r * v + j] = gl[r * v + j] + scale * (probs[r * v + j] - target);
                        }
                    }
                });
            }
            &Op::Sum { a } => acc(a, &mut |ga| ga.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let parts = rule.backward(g, &ins, &nodes[i].value);
                for (v, part) in inputs.iter().zip(parts) {
                    acc(*v, &mut |gv| gv.iter_mut().zip(&part).for_each(|(o, &x)| *o = *o + x));
                }
            }
        }
    }
}
