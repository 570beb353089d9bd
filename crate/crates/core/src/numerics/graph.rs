use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    MatVec { w: TensorId, x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    SoftmaxAxis { x: TensorId, axis: usize },
    LogSoftmax { x: TensorId },
    Sum { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    Scale { x: TensorId, c: f64 },
    Reshape { x: TensorId },
    Concat { parts: Vec<TensorId> },
    StackRows { rows: Vec<TensorId> },
    Row { x: TensorId, index: usize },
    Pick { x: TensorId, index: usize },
    Lookup { table: TensorId, ids: Vec<usize> },
    /// Test-only op whose backward rule is deliberately wrong; used as the
    /// negative control for gradient checking.
    #[cfg(test)]
    TanhCorrupted { x: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when a gradient needs to flow through this node.
    needs_grad: bool,
}

/// Dynamic computation record, rebuilt for every forward pass.
///
/// Nodes are appended in execution order, so the list itself is a topological
/// order: every node's inputs precede it. `backward` walks it once in reverse
/// and accumulates gradients additively into every `requires_grad` tensor
/// reachable from the loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Gradients flow into it iff `requires_grad`
    /// is set on the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        id
    }

    fn push_result(&mut self, data: Vec<f64>, shape: &[usize], op: Op, needs: bool) -> TensorId {
        let tensor = Tensor::new(data, shape).expect("internal op produced a malformed tensor");
        self.push(tensor, op, needs)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Overwrites one coordinate of a leaf tensor. Together with
    /// [`Graph::refresh`] this supports cheap repeated re-evaluation of the
    /// same recorded computation, as finite differences need.
    pub fn set_leaf_value(&mut self, id: TensorId, index: usize, value: f64) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(
                "only leaf tensors can be overwritten".into(),
            ));
        }
        if index >= node.tensor.numel() {
            return Err(Error::Index(format!(
                "coordinate {index} out of range for {} elements",
                node.tensor.numel()
            )));
        }
        node.tensor.data_mut()[index] = value;
        Ok(())
    }

    /// Recomputes every non-leaf node in place from the current leaf
    /// values, in recording order. The arithmetic is identical to the
    /// original forward construction; no allocation happens.
    pub fn refresh(&mut self) {
        for i in 0..self.nodes.len() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let input = |id: TensorId| -> &Tensor { &before[id.0].tensor };
            match node.op.clone() {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = input(a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = input(b).shape()[1];
                    matmul_into(
                        input(a).data(),
                        input(b).data(),
                        m,
                        k,
                        n,
                        node.tensor.data_mut(),
                    );
                }
                Op::MatVec { w, x } => {
                    let sw = input(w).shape();
                    let (m, k) = (sw[0], sw[1]);
                    matmul_into(input(w).data(), input(x).data(), m, k, 1, node.tensor.data_mut());
                }
                Op::Add { a, b } => {
                    let (a, b) = (input(a).data(), input(b).data());
                    for (o, (x, y)) in node.tensor.data_mut().iter_mut().zip(a.iter().zip(b)) {
                        *o = x + y;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (input(a).data(), input(b).data());
                    for (o, (x, y)) in node.tensor.data_mut().iter_mut().zip(a.iter().zip(b)) {
                        *o = x * y;
                    }
                }
                Op::Tanh { x } => {
                    let x = input(x).data();
                    for (o, v) in node.tensor.data_mut().iter_mut().zip(x) {
                        *o = v.tanh();
                    }
                }
                Op::Sigmoid { x } => {
                    let x = input(x).data();
                    for (o, v) in node.tensor.data_mut().iter_mut().zip(x) {
                        *o = 1.0 / (1.0 + (-v).exp());
                    }
                }
                Op::SoftmaxAxis { x, axis } => {
                    let shape = input(x).shape().to_vec();
                    let out = softmax_slices(input(x).data(), &shape, axis);
                    node.tensor.data_mut().copy_from_slice(&out);
                }
                Op::LogSoftmax { x } => {
                    let x = input(x).data();
                    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let log_z = x.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
                    for (o, v) in node.tensor.data_mut().iter_mut().zip(x) {
                        *o = v - max - log_z;
                    }
                }
                Op::Sum { x } => {
                    node.tensor.data_mut()[0] = input(x).data().iter().sum();
                }
                Op::SumAxis { x, axis } => {
                    let shape = input(x).shape();
                    let (rows, cols) = (shape[0], shape[1]);
                    let data = input(x).data();
                    let out = node.tensor.data_mut();
                    if axis == 0 {
                        for c in 0..cols {
                            out[c] = (0..rows).map(|r| data[r * cols + c]).sum();
                        }
                    } else {
                        for r in 0..rows {
                            out[r] = data[r * cols..(r + 1) * cols].iter().sum();
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let x = input(x).data();
                    for (o, v) in node.tensor.data_mut().iter_mut().zip(x) {
                        *o = v * c;
                    }
                }
                Op::Reshape { x } => {
                    let x = input(x).data();
                    node.tensor.data_mut().copy_from_slice(x);
                }
                Op::Concat { ref parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let src = input(p).data();
                        node.tensor.data_mut()[offset..offset + src.len()].copy_from_slice(src);
                        offset += src.len();
                    }
                }
                Op::StackRows { ref rows } => {
                    let width = input(rows[0]).numel();
                    for (r, &part) in rows.iter().enumerate() {
                        let src = input(part).data();
                        node.tensor.data_mut()[r * width..(r + 1) * width].copy_from_slice(src);
                    }
                }
                Op::Row { x, index } => {
                    let cols = input(x).shape()[1];
                    let src = &input(x).data()[index * cols..(index + 1) * cols];
                    node.tensor.data_mut().copy_from_slice(src);
                }
                Op::Pick { x, index } => {
                    node.tensor.data_mut()[0] = input(x).data()[index];
                }
                Op::Lookup { table, ref ids } => {
                    let shape = input(table).shape();
                    let (emb, vocab) = (shape[0], shape[1]);
                    let src = input(table).data();
                    let out = node.tensor.data_mut();
                    for (t, &id) in ids.iter().enumerate() {
                        for e in 0..emb {
                            out[t * emb + e] = src[e * vocab + id];
                        }
                    }
                }
                #[cfg(test)]
                Op::TanhCorrupted { x } => {
                    let x = input(x).data();
                    for (o, v) in node.tensor.data_mut().iter_mut().zip(x) {
                        *o = v.tanh();
                    }
                }
            }
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Matrix product of `a: [m×k]` and `b: [k×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_result(out, &[m, n], Op::Matmul { a, b }, needs))
    }

    /// Matrix-vector product of `w: [m×k]` and `x: [k]`, yielding `[m]`.
    /// Same arithmetic as `matmul` against a `[k×1]` column, without the
    /// reshapes.
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> Result<TensorId> {
        let (sw, sx) = (self.value(w).shape(), self.value(x).shape());
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::dimension("matvec", sw, sx));
        }
        let (m, k) = (sw[0], sw[1]);
        let out = matmul_raw(self.value(w).data(), self.value(x).data(), m, k, 1);
        let needs = self.needs(w) || self.needs(x);
        Ok(self.push_result(out, &[m], Op::MatVec { w, x }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension("add", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_result(data, &shape, Op::Add { a, b }, needs))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push_result(data, &shape, Op::Mul { a, b }, needs))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push_result(data, &shape, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push_result(data, &shape, Op::Sigmoid { x }, needs)
    }

    /// Softmax over every 1-D slice along `axis`, with the per-slice maximum
    /// subtracted before exponentiation so large scores cannot overflow.
    pub fn softmax_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let data = softmax_slices(self.value(x).data(), &shape, axis);
        let needs = self.needs(x);
        Ok(self.push_result(data, &shape, Op::SoftmaxAxis { x, axis }, needs))
    }

    /// Log-softmax of a vector: `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::dimension("log_softmax", v.shape(), &[]));
        }
        if !v.is_finite() {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = v.data().iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let data = v.data().iter().map(|a| a - max - log_z).collect();
        let shape = v.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push_result(data, &shape, Op::LogSoftmax { x }, needs))
    }

    /// Sum of all elements, returned as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push_result(vec![total], &[], Op::Sum { x }, needs)
    }

    /// Sums a rank-2 tensor along `axis`, yielding a vector.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 || axis >= 2 {
            return Err(Error::Contract(format!(
                "sum_axis expects a rank-2 tensor and axis < 2, got {shape:?} axis {axis}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data = self.value(x).data();
        let out = if axis == 0 {
            (0..cols)
                .map(|c| (0..rows).map(|r| data[r * cols + c]).sum())
                .collect::<Vec<f64>>()
        } else {
            (0..rows)
                .map(|r| data[r * cols..(r + 1) * cols].iter().sum())
                .collect::<Vec<f64>>()
        };
        let len = out.len();
        let needs = self.needs(x);
        Ok(self.push_result(out, &[len], Op::SumAxis { x, axis }, needs))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push_result(data, &shape, Op::Scale { x, c }, needs)
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension("reshape", self.value(x).shape(), shape));
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs(x);
        Ok(self.push_result(data, shape, Op::Reshape { x }, needs))
    }

    /// Concatenates vectors into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::dimension("concat", v.shape(), &[]));
            }
            data.extend_from_slice(v.data());
            needs |= self.needs(p);
        }
        let len = data.len();
        Ok(self.push_result(
            data,
            &[len],
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of zero tensors".into()));
        }
        let width = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut needs = false;
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.numel() != width {
                return Err(Error::dimension("stack_rows", v.shape(), &[width]));
            }
            data.extend_from_slice(v.data());
            needs |= self.needs(r);
        }
        Ok(self.push_result(
            data,
            &[rows.len(), width],
            Op::StackRows {
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Extracts row `index` of a rank-2 tensor as a vector.
    pub fn row(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension("row", &shape, &[]));
        }
        if index >= shape[0] {
            return Err(Error::Index(format!(
                "row {index} out of range for {} rows",
                shape[0]
            )));
        }
        let cols = shape[1];
        let data = self.value(x).data()[index * cols..(index + 1) * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push_result(data, &[cols], Op::Row { x, index }, needs))
    }

    /// Extracts element `index` of a vector as a scalar.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId> {
        let v = self.value(x);
        if v.rank() != 1 {
            return Err(Error::dimension("pick", v.shape(), &[]));
        }
        if index >= v.numel() {
            return Err(Error::Index(format!(
                "pick {index} out of range for length {}",
                v.numel()
            )));
        }
        let data = vec![v.data()[index]];
        let needs = self.needs(x);
        Ok(self.push_result(data, &[], Op::Pick { x, index }, needs))
    }

    /// Embedding lookup: row `t` of the output is column `ids[t]` of
    /// `table: [E×V]`.
    pub fn lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dimension("lookup", &shape, &[]));
        }
        if ids.is_empty() {
            return Err(Error::Contract("lookup of zero ids".into()));
        }
        let (emb, vocab) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary(format!(
                "token id {bad} out of range for vocabulary of size {vocab}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * emb);
        for &id in ids {
            for e in 0..emb {
                data.push(src[e * vocab + id]);
            }
        }
        let needs = self.needs(table);
        Ok(self.push_result(
            data,
            &[ids.len(), emb],
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    #[cfg(test)]
    pub(crate) fn tanh_corrupted(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push_result(data, &shape, Op::TanhCorrupted { x }, needs)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each call adds the new adjoints into
    /// the existing gradient buffers, so calling twice without zeroing
    /// doubles every gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(grad) = adjoint[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[i].tensor.requires_grad {
                        self.nodes[i].tensor.accumulate_grad(&grad);
                    }
                }
                Op::Matmul { a, b } => {
                    let sa = self.value(a).shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = self.value(b).shape()[1];
                    if self.needs(a) {
                        // a.grad += g · bᵀ
                        let bt = transpose_raw(self.value(b).data(), k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        add_into(&mut adjoint[a.0], &da);
                    }
                    if self.needs(b) {
                        // b.grad += aᵀ · g
                        let at = transpose_raw(self.value(a).data(), m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        add_into(&mut adjoint[b.0], &db);
                    }
                }
                Op::MatVec { w, x } => {
                    let sw = self.value(w).shape();
                    let (m, k) = (sw[0], sw[1]);
                    if self.needs(w) {
                        // w.grad += g ⊗ x (outer product).
                        let x_data = self.value(x).data();
                        let mut dw = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                dw[i * k + p] = grad[i] * x_data[p];
                            }
                        }
                        add_into(&mut adjoint[w.0], &dw);
                    }
                    if self.needs(x) {
                        // x.grad += wᵀ · g
                        let wt = transpose_raw(self.value(w).data(), m, k);
                        let dx = matmul_raw(&wt, &grad, k, m, 1);
                        add_into(&mut adjoint[x.0], &dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(a) {
                        add_into(&mut adjoint[a.0], &grad);
                    }
                    if self.needs(b) {
                        add_into(&mut adjoint[b.0], &grad);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(g, y)| g * y)
                            .collect();
                        add_into(&mut adjoint[a.0], &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(g, x)| g * x)
                            .collect();
                        add_into(&mut adjoint[b.0], &db);
                    }
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].tensor.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].tensor.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::SoftmaxAxis { x, axis } => {
                    let out = self.nodes[i].tensor.data();
                    let shape = self.nodes[i].tensor.shape();
                    let dx = softmax_backward(out, &grad, shape, axis);
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::LogSoftmax { x } => {
                    // dx_i = g_i - softmax_i · Σ g
                    let out = self.nodes[i].tensor.data();
                    let g_sum: f64 = grad.iter().sum();
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(out)
                        .map(|(g, lp)| g - lp.exp() * g_sum)
                        .collect();
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Sum { x } => {
                    let n = self.value(x).numel();
                    add_into(&mut adjoint[x.0], &vec![grad[0]; n]);
                }
                Op::SumAxis { x, axis } => {
                    let shape = self.value(x).shape();
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = if axis == 0 { grad[c] } else { grad[r] };
                        }
                    }
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Reshape { x } => {
                    add_into(&mut adjoint[x.0], &grad);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).numel();
                        if self.needs(p) {
                            add_into(&mut adjoint[p.0], &grad[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::StackRows { rows } => {
                    let width = self.value(rows[0]).numel();
                    for (r, part) in rows.into_iter().enumerate() {
                        if self.needs(part) {
                            add_into(&mut adjoint[part.0], &grad[r * width..(r + 1) * width]);
                        }
                    }
                }
                Op::Row { x, index } => {
                    let shape = self.value(x).shape();
                    let (rows, cols) = (shape[0], shape[1]);
                    let mut dx = vec![0.0; rows * cols];
                    dx[index * cols..(index + 1) * cols].copy_from_slice(&grad);
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Pick { x, index } => {
                    let mut dx = vec![0.0; self.value(x).numel()];
                    dx[index] = grad[0];
                    add_into(&mut adjoint[x.0], &dx);
                }
                Op::Lookup { table, ids } => {
                    let shape = self.value(table).shape();
                    let (emb, vocab) = (shape[0], shape[1]);
                    let mut dt = vec![0.0; emb * vocab];
                    for (t, &id) in ids.iter().enumerate() {
                        for e in 0..emb {
                            dt[e * vocab + id] += grad[t * emb + e];
                        }
                    }
                    add_into(&mut adjoint[table.0], &dt);
                }
                #[cfg(test)]
                Op::TanhCorrupted { x } => {
                    // Wrong on purpose: uses the derivative of sigmoid.
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].tensor.data())
                        .map(|(g, t)| g * t * (1.0 - t))
                        .collect();
                    add_into(&mut adjoint[x.0], &dx);
                }
            }
        }
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Softmax of every 1-D slice along `axis`, each slice shifted by its own
/// maximum first.
fn softmax_slices(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let max = (0..axis_len)
                .map(|a| data[at(a)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..axis_len {
                let e = (data[at(a)] - max).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..axis_len {
                out[at(a)] /= z;
            }
        }
    }
    out
}

fn softmax_backward(out: &[f64], grad: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut dx = vec![0.0; out.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_len * inner + a * inner + i;
            let dot: f64 = (0..axis_len).map(|a| grad[at(a)] * out[at(a)]).sum();
            for a in 0..axis_len {
                dx[at(a)] = out[at(a)] * (grad[at(a)] - dot);
            }
        }
    }
    dx
}
