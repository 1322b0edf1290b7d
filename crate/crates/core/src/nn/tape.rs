//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations on 2-D tensors in execution order. Node
//! indices are therefore already a topological order and the backward pass
//! is a single reverse sweep. Parameters are borrowed from a [`ParamStore`]
//! for the lifetime of the tape, so a forward pass never copies weights.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Marker for an absent neighbor in a [`Tape::neighbor_gather`] table.
pub const NO_NEIGHBOR: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value.with_grad(true));
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    NeighborGather(Var, Arc<[u32]>),
    SparseConv(Var, Var, Arc<[u32]>),
    SegmentMean(Var, Arc<[usize]>, Arc<[usize]>),
    PosEnc(Var, usize),
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of a differentiable computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(what, "rank-2 tensor", format!("shape {s:?}"))),
    }
}

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape m×k and `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the extents described by the strides,
    // checked by the assertions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf. Its gradient is tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, g)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t.with_grad(false)), Op::Leaf, false)
    }

    /// A leaf whose gradient is always tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.push(Cow::Borrowed(store.get(id)), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, n) = dims2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim("matmul inner dimension", k, k2));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(Tensor::matrix(m, n, out)?), Op::MatMul(a, b), g))
    }

    /// Adds a length-`n` bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "add_bias input")?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim("bias width", n, b.len()));
        }
        let mut out = self.value(a).data().to_vec();
        let bd = b.data();
        for row in out.chunks_exact_mut(n.max(1)) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        let g = self.needs(a) || self.needs(bias);
        Ok(self.push(Cow::Owned(Tensor::matrix(m, n, out)?), Op::AddBias(a, bias), g))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(what, format!("{:?}", ta.shape()), format!("{:?}", tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(t), op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let g = self.needs(a);
        self.push(Cow::Owned(t), Op::Scale(a, factor), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        let g = self.needs(a);
        self.push(Cow::Owned(t), Op::Relu(a), g)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let rows = dims2(self.value(first), "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat")?;
            if r != rows {
                return Err(Error::dim("concat row count", rows, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Cow::Owned(Tensor::matrix(rows, total, out)?),
            Op::Concat(parts.to_vec()),
            g,
        ))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim("slice_cols range", format!("within 0..{n}"), format!("{start}..{end}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let g = self.needs(a);
        Ok(self.push(Cow::Owned(Tensor::matrix(m, w, out)?), Op::SliceCols(a, start), g))
    }

    /// `out[i] = src[index[i]]` row-wise.
    pub fn gather_rows(&mut self, src: Var, index: Arc<[usize]>) -> Result<Var> {
        let (m, c) = dims2(self.value(src), "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows index", format!("< {m}"), bad));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&s[i * c..(i + 1) * c]);
        }
        let g = self.needs(src);
        let t = Tensor::matrix(index.len(), c, out)?;
        Ok(self.push(Cow::Owned(t), Op::GatherRows(src, index), g))
    }

    /// Gathers `k` neighbor rows per output row into one wide row.
    ///
    /// `table` is row-major `rows × k`; entry `j` of row `i` names the source
    /// row placed at columns `[j*c, (j+1)*c)` of output row `i`, or
    /// [`NO_NEIGHBOR`] for a zero block.
    pub fn neighbor_gather(&mut self, src: Var, table: Arc<[u32]>, k: usize) -> Result<Var> {
        let (m, c) = dims2(self.value(src), "neighbor_gather")?;
        if k == 0 || table.len() % k != 0 {
            return Err(Error::dim("neighbor table", format!("multiple of {k}"), table.len()));
        }
        let rows = table.len() / k;
        let s = self.value(src).data();
        let mut out = vec![0.0; rows * k * c];
        for (slot, &j) in table.iter().enumerate() {
            if j == NO_NEIGHBOR {
                continue;
            }
            let j = j as usize;
            if j >= m {
                return Err(Error::dim("neighbor index", format!("< {m}"), j));
            }
            out[slot * c..(slot + 1) * c].copy_from_slice(&s[j * c..(j + 1) * c]);
        }
        let g = self.needs(src);
        let t = Tensor::matrix(rows, k * c, out)?;
        Ok(self.push(Cow::Owned(t), Op::NeighborGather(src, table), g))
    }

    /// `neighbor_gather(src, table, k) · weight` without materializing the
    /// gathered matrix: each of the `k` kernel slots multiplies only the rows
    /// that have a neighbor there. `weight` is `(k·c) × c_out`.
    pub fn sparse_conv(&mut self, src: Var, weight: Var, table: Arc<[u32]>, k: usize) -> Result<Var> {
        let (m, c) = dims2(self.value(src), "sparse_conv")?;
        let (wr, cout) = dims2(self.value(weight), "sparse_conv weight")?;
        if wr != k * c {
            return Err(Error::dim("sparse_conv weight rows", k * c, wr));
        }
        if k == 0 || table.len() % k != 0 {
            return Err(Error::dim("neighbor table", format!("multiple of {k}"), table.len()));
        }
        if let Some(&j) = table.iter().find(|&&j| j != NO_NEIGHBOR && j as usize >= m) {
            return Err(Error::dim("neighbor index", format!("< {m}"), j));
        }
        let rows = table.len() / k;
        let s = self.value(src).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; rows * cout];
        let mut buf = Vec::new();
        let mut tmp = Vec::new();
        for (slot, pairs) in rulebook(&table, k).iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            buf.clear();
            for &(_, j) in pairs {
                buf.extend_from_slice(&s[j * c..(j + 1) * c]);
            }
            tmp.clear();
            tmp.resize(p * cout, 0.0);
            gemm(p, c, cout, &buf, false, &w[slot * c * cout..(slot + 1) * c * cout], false, &mut tmp, 0.0);
            for (r, &(i, _)) in pairs.iter().enumerate() {
                add_into(&mut out[i * cout..(i + 1) * cout], &tmp[r * cout..(r + 1) * cout]);
            }
        }
        let g = self.needs(src) || self.needs(weight);
        let t = Tensor::matrix(rows, cout, out)?;
        Ok(self.push(Cow::Owned(t), Op::SparseConv(src, weight, table), g))
    }

    /// Mean of the rows sharing a segment id; `counts[s]` rows map to segment `s`.
    pub fn segment_mean(&mut self, src: Var, segment: Arc<[usize]>, counts: Arc<[usize]>) -> Result<Var> {
        let (m, c) = dims2(self.value(src), "segment_mean")?;
        if segment.len() != m {
            return Err(Error::dim("segment map length", m, segment.len()));
        }
        let n_seg = counts.len();
        let s = self.value(src).data();
        let mut out = vec![0.0; n_seg * c];
        for (r, &seg) in segment.iter().enumerate() {
            if seg >= n_seg {
                return Err(Error::dim("segment id", format!("< {n_seg}"), seg));
            }
            let inv = 1.0 / counts[seg] as f64;
            for (o, v) in out[seg * c..(seg + 1) * c].iter_mut().zip(&s[r * c..(r + 1) * c]) {
                *o += v * inv;
            }
        }
        let g = self.needs(src);
        let t = Tensor::matrix(n_seg, c, out)?;
        Ok(self.push(Cow::Owned(t), Op::SegmentMean(src, segment, counts), g))
    }

    /// Sinusoidal encoding of every column with `levels` octaves; see
    /// [`crate::deform::positional_encode`] for the per-scalar layout.
    pub fn posenc(&mut self, src: Var, levels: usize) -> Result<Var> {
        let (m, d) = dims2(self.value(src), "posenc")?;
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(m * d * 2 * levels);
        for &p in s {
            out.extend(crate::deform::positional_encode(p, levels));
        }
        let g = self.needs(src);
        let t = Tensor::matrix(m, d * 2 * levels, out)?;
        Ok(self.push(Cow::Owned(t), Op::PosEnc(src, levels), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let g = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let g = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mean(a), g)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<ParamTape> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Tensor::new(v.shape().to_vec(), vec![1.0])?;
        self.backward_from(loss, seed)
    }

    /// Reverse sweep seeded with an explicit cotangent for `root`.
    pub fn backward_from(&self, root: Var, seed: Tensor) -> Result<ParamTape> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::dim(
                "backward seed",
                format!("{:?}", self.value(root).shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(&id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        params.insert(id, g);
                    }
                }
            }
        }
        Ok(ParamTape { grads, params })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, ta.shape());
                    gemm(m, n, k, gd, false, tb.data(), true, buf, 1.0);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, tb.shape());
                    gemm(k, m, n, ta.data(), true, gd, false, buf, 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    add_into(grad_buf(grads, *a, g.shape()), gd);
                }
                if self.needs(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    let n = shape.iter().product::<usize>();
                    let buf = grad_buf(grads, *bias, &shape);
                    for row in gd.chunks_exact(n.max(1)) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(grad_buf(grads, *a, g.shape()), gd);
                }
                if self.needs(*b) {
                    add_into(grad_buf(grads, *b, g.shape()), gd);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(grad_buf(grads, *a, g.shape()), gd);
                }
                if self.needs(*b) {
                    let buf = grad_buf(grads, *b, g.shape());
                    buf.iter_mut().zip(gd).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.value(*b).data();
                    let buf = grad_buf(grads, *a, g.shape());
                    for ((o, v), w) in buf.iter_mut().zip(gd).zip(other) {
                        *o += v * w;
                    }
                }
                if self.needs(*b) {
                    let other = self.value(*a).data();
                    let buf = grad_buf(grads, *b, g.shape());
                    for ((o, v), w) in buf.iter_mut().zip(gd).zip(other) {
                        *o += v * w;
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let buf = grad_buf(grads, *a, g.shape());
                    buf.iter_mut().zip(gd).for_each(|(o, v)| *o += f * v);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let out = node.value.data();
                    let buf = grad_buf(grads, *a, g.shape());
                    for ((o, v), y) in buf.iter_mut().zip(gd).zip(out) {
                        if *y > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = shape[1];
                    if self.needs(p) {
                        let buf = grad_buf(grads, p, &shape);
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &gd[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape[1];
                    let w = g.shape()[1];
                    let buf = grad_buf(grads, *a, &shape);
                    for (r, row) in gd.chunks_exact(w.max(1)).enumerate() {
                        add_into(&mut buf[r * n + start..r * n + start + w], row);
                    }
                }
            }
            Op::GatherRows(src, index) => {
                if self.needs(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let c = shape[1];
                    let buf = grad_buf(grads, *src, &shape);
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::NeighborGather(src, table) => {
                if self.needs(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let c = shape[1];
                    let buf = grad_buf(grads, *src, &shape);
                    for (slot, &j) in table.iter().enumerate() {
                        if j != NO_NEIGHBOR {
                            let j = j as usize;
                            add_into(&mut buf[j * c..(j + 1) * c], &gd[slot * c..(slot + 1) * c]);
                        }
                    }
                }
            }
            Op::SparseConv(src, weight, table) => {
                let (ts, tw) = (self.value(*src), self.value(*weight));
                let c = ts.shape()[1];
                let cout = tw.shape()[1];
                let k = tw.shape()[0] / c.max(1);
                let book = rulebook(table, k);
                let gather = |pairs: &[(usize, usize)], data: &[f64], width: usize, pick_out: bool| {
                    let mut v = Vec::with_capacity(pairs.len() * width);
                    for &(i, j) in pairs {
                        let r = if pick_out { i } else { j };
                        v.extend_from_slice(&data[r * width..(r + 1) * width]);
                    }
                    v
                };
                if self.needs(*weight) {
                    let buf = grad_buf(grads, *weight, tw.shape());
                    for (slot, pairs) in book.iter().enumerate() {
                        if pairs.is_empty() {
                            continue;
                        }
                        let gout = gather(pairs, gd, cout, true);
                        let xin = gather(pairs, ts.data(), c, false);
                        let dw = &mut buf[slot * c * cout..(slot + 1) * c * cout];
                        gemm(c, pairs.len(), cout, &xin, true, &gout, false, dw, 1.0);
                    }
                }
                if self.needs(*src) {
                    let buf = grad_buf(grads, *src, ts.shape());
                    let mut tmp = Vec::new();
                    for (slot, pairs) in book.iter().enumerate() {
                        if pairs.is_empty() {
                            continue;
                        }
                        let gout = gather(pairs, gd, cout, true);
                        tmp.clear();
                        tmp.resize(pairs.len() * c, 0.0);
                        let w = &tw.data()[slot * c * cout..(slot + 1) * c * cout];
                        gemm(pairs.len(), cout, c, &gout, false, w, true, &mut tmp, 0.0);
                        for (r, &(_, j)) in pairs.iter().enumerate() {
                            add_into(&mut buf[j * c..(j + 1) * c], &tmp[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::SegmentMean(src, segment, counts) => {
                if self.needs(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let c = shape[1];
                    let buf = grad_buf(grads, *src, &shape);
                    for (r, &seg) in segment.iter().enumerate() {
                        let inv = 1.0 / counts[seg] as f64;
                        for (o, v) in buf[r * c..(r + 1) * c].iter_mut().zip(&gd[seg * c..(seg + 1) * c]) {
                            *o += v * inv;
                        }
                    }
                }
            }
            Op::PosEnc(src, levels) => {
                if self.needs(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    let out = node.value.data();
                    let buf = grad_buf(grads, *src, &shape);
                    let w = 2 * levels;
                    for (e, o) in buf.iter_mut().enumerate() {
                        let base = e * w;
                        let mut acc = 0.0;
                        let mut freq = std::f64::consts::PI;
                        for l in 0..*levels {
                            let (s, c) = (out[base + 2 * l], out[base + 2 * l + 1]);
                            acc += freq * (c * gd[base + 2 * l] - s * gd[base + 2 * l + 1]);
                            freq *= 2.0;
                        }
                        *o += acc;
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let s = gd[0];
                    grad_buf(grads, *a, &shape).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let s = gd[0] / n.max(1) as f64;
                    grad_buf(grads, *a, &shape).iter_mut().for_each(|o| *o += s);
                }
            }
        }
    }
}

/// `(output row, source row)` pairs per kernel slot.
fn rulebook(table: &[u32], k: usize) -> Vec<Vec<(usize, usize)>> {
    let mut book = vec![Vec::new(); k];
    for (idx, &j) in table.iter().enumerate() {
        if j != NO_NEIGHBOR {
            book[idx % k].push((idx / k, j as usize));
        }
    }
    book
}

fn grad_buf<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Gradients produced by one backward pass.
pub struct ParamTape {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl ParamTape {
    /// Gradient of a node, or `None` when the node was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter that appeared on the tape; zero when unreachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` against the tape gradient of every input.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Var,
    {
        let loss_of = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (vi, v) in vars.iter().enumerate() {
            let g = grads.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[vi].shape()));
            for e in 0..inputs[vi].len() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[e] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = g.data()[e];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {vi} elem {e}: analytic {an} vs fd {fd}");
            }
        }
    }

    /// Random weighted sum so every output element matters.
    fn weighted<'t>(tape: &mut Tape<'t>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(v).shape().to_vec();
        let w = tape.constant(random(&mut rng, &shape));
        let p = tape.mul(v, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::full(&[1, 1], 2.0));
        let unused = store.add("unused", Tensor::full(&[2, 2], 1.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, used);
        let _b = tape.param(&store, unused);
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(used).unwrap().data(), &[1.0]);
        assert_eq!(g.param(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn gradcheck_matmul_bias_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, &[4, 3]), random(&mut rng, &[3, 5]), random(&mut rng, &[5])];
        check(inputs, |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let b = t.add_bias(m, v[2]).unwrap();
            let r = t.relu(b);
            weighted(t, r, 7)
        });
    }

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
        check(inputs, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let s = t.sub(a, v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let k = t.scale(m, -1.7);
            let total = weighted(t, k, 3);
            let mean = t.mean(v[0]);
            t.add(total, mean).unwrap()
        });
    }

    #[test]
    fn gradcheck_concat_slice_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(&mut rng, &[4, 2]), random(&mut rng, &[4, 3])];
        check(inputs, |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
            let s = t.slice_cols(c, 1, 6).unwrap();
            let g = t.gather_rows(s, Arc::from(vec![3usize, 0, 0, 2, 1])).unwrap();
            weighted(t, g, 11)
        });
    }

    #[test]
    fn gradcheck_neighbor_gather_and_segment_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&mut rng, &[4, 3])];
        let table: Arc<[u32]> = Arc::from(vec![0, NO_NEIGHBOR, 2, 1, 1, NO_NEIGHBOR, 3, 0, 2]);
        check(inputs, move |t, v| {
            let g = t.neighbor_gather(v[0], table.clone(), 3).unwrap();
            let m = t.segment_mean(g, Arc::from(vec![1usize, 0, 1]), Arc::from(vec![1usize, 2])).unwrap();
            weighted(t, m, 5)
        });
    }

    #[test]
    fn gradcheck_sparse_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![random(&mut rng, &[4, 2]), random(&mut rng, &[6, 3])];
        let table: Arc<[u32]> = Arc::from(vec![0, NO_NEIGHBOR, 2, 1, 1, NO_NEIGHBOR, 3, 0, 2]);
        check(inputs, move |t, v| {
            let y = t.sparse_conv(v[0], v[1], table.clone(), 3).unwrap();
            weighted(t, y, 9)
        });
    }

    #[test]
    fn sparse_conv_equals_gather_then_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, &[5, 3]);
        let w = random(&mut rng, &[12, 2]);
        let table: Arc<[u32]> = Arc::from(vec![0, 4, NO_NEIGHBOR, 1, NO_NEIGHBOR, NO_NEIGHBOR, NO_NEIGHBOR, 2, 3, 3, 3, 0]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let a = tape.sparse_conv(xv, wv, table.clone(), 4).unwrap();
        let g = tape.neighbor_gather(xv, table, 4).unwrap();
        let b = tape.matmul(g, wv).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-14);
    }

    #[test]
    fn gradcheck_posenc() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random(&mut rng, &[3, 2])];
        check(inputs, |t, v| {
            let e = t.posenc(v[0], 4).unwrap();
            weighted(t, e, 13)
        });
    }

    #[test]
    fn chain_rule_matches_manual_composition() {
        // f(g(x)) with g(x) = W x + b and f(y) = sum(relu(y) * c): compare with
        // the product of hand-derived Jacobians on random composites.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x = random(&mut rng, &[1, 3]);
            let w = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4]);
            let c = random(&mut rng, &[1, 4]);
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let cv = tape.constant(c.clone());
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.add_bias(y, bv).unwrap();
            let r = tape.relu(y);
            let p = tape.mul(r, cv).unwrap();
            let s = tape.sum(p);
            let g = tape.backward(s).unwrap();
            let ydata = tape.value(y).data().to_vec();
            for i in 0..3 {
                let manual: f64 = (0..4)
                    .map(|j| if ydata[j] > 0.0 { c.data()[j] * w.data()[i * 4 + j] } else { 0.0 })
                    .sum();
                let got = g.grad(xv).unwrap().data()[i];
                assert!((manual - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..6).map(|_| rng.random()).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|_| rng.random()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - e).abs() < 1e-14);
            }
        }
        // (Aᵀ)ᵀ with A stored 3x2
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (k, i))).map(|(k, i)| a[i * 3 + k]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &b, false, &mut c2, 0.0);
        assert_eq!(c, c2);
    }
}
