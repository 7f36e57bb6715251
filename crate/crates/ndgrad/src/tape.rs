use crate::kernels::{self, ConvDims};
use crate::{GradError, NdArray, Result, Scalar};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Payload<T: Scalar> {
    Leaf,
    Detach { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, c: T },
    AddBias { x: NodeId, bias: NodeId, axis: usize },
    Matmul { a: NodeId, b: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    Reshape { x: NodeId },
    Conv3d { x: NodeId, w: NodeId, dims: ConvDims },
    Conv3dTranspose { x: NodeId, w: NodeId, dims: ConvDims },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, indices: Vec<usize> },
    Dropout { x: NodeId, mask: Option<NdArray<T>> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    Mse { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    GlobalAvgPool3d { x: NodeId },
}

struct Node<T: Scalar> {
    value: NdArray<T>,
    grad: Option<NdArray<T>>,
    needs_grad: bool,
    op: Payload<T>,
}

/// Computation tape: an append-only arena of nodes in topological order.
/// `backward` walks it once in reverse and adds the pass's gradients into
/// per-node accumulators (so two backward calls without `zero_grads`
/// accumulate exactly twice the gradient).
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray<T>, needs_grad: bool, op: Payload<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Untrainable input (data, masks, targets-as-floats).
    pub fn constant(&mut self, value: NdArray<T>) -> NodeId {
        self.push(value, false, Payload::Leaf)
    }

    /// Trainable leaf: receives a gradient accumulator.
    pub fn param(&mut self, value: NdArray<T>) -> NodeId {
        self.push(value, true, Payload::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &NdArray<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&NdArray<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Accumulated gradient, zeros when the node was unreachable from the loss.
    pub fn grad_or_zeros(&self, id: NodeId) -> NdArray<T> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => NdArray::zeros(self.nodes[id.0].value.shape()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- elementwise and structural ops ------------------------------------

    /// Identity with gradient flow blocked (stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.clone();
        self.push(value, false, Payload::Detach { x })
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(GradError::DimensionMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = NdArray::from_vec(self.nodes[a.0].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Payload::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = NdArray::from_vec(self.nodes[a.0].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Payload::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = NdArray::from_vec(self.nodes[a.0].value.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Payload::Mul { a, b }))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| -v);
        let ng = self.needs(x);
        self.push(value, ng, Payload::Neg { x })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v * c);
        let ng = self.needs(x);
        self.push(value, ng, Payload::Scale { x, c })
    }

    /// Broadcast-add a rank-1 bias along `axis` of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, axis: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape();
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(GradError::DimensionMismatch {
                op: "add_bias",
                lhs: xs.clone(),
                rhs: bs.to_vec(),
            });
        }
        let inner: usize = xs[axis + 1..].iter().product();
        let lane = xs[axis];
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut data = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            data.push(v + bv[(i / inner) % lane]);
        }
        let value = NdArray::from_vec(&xs, data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, ng, Payload::AddBias { x, bias, axis }))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(GradError::InvalidParameter {
                op: "permute",
                message: format!("axes {axes:?} is not a permutation of 0..{}", xs.len()),
            });
        }
        let value = permute_array(&self.nodes[x.0].value, axes);
        let ng = self.needs(x);
        Ok(self.push(value, ng, Payload::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = NdArray::from_vec(shape, self.nodes[x.0].value.data().to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(value, ng, Payload::Reshape { x }))
    }

    // ---- linear algebra -----------------------------------------------------

    /// Batched matrix product. Last two axes are [m, k] x [k, n]; leading axes
    /// broadcast element-wise.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let dims = MatmulDims::resolve(&sa, &sb)?;
        let value = matmul_batched(&self.nodes[a.0].value, &self.nodes[b.0].value, &dims);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Payload::Matmul { a, b }))
    }

    // ---- convolutions -------------------------------------------------------

    fn conv_dims(
        &self,
        op: &'static str,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        transpose: bool,
    ) -> Result<ConvDims> {
        let xs = self.nodes[x.0].value.shape();
        let ws = self.nodes[w.0].value.shape();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(GradError::DimensionMismatch {
                op,
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(GradError::InvalidParameter {
                op,
                message: "stride must be positive".into(),
            });
        }
        // conv kernel: [Co, Ci, ...]; transpose kernel: [Ci, Co, ...]
        let (c_in, c_out) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != c_in {
            return Err(GradError::DimensionMismatch {
                op,
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let input = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let mut output = [0usize; 3];
        for i in 0..3 {
            output[i] = if transpose {
                kernels::conv_transpose_out_extent(input[i], kernel[i], stride, pad)?
            } else {
                kernels::conv_out_extent(input[i], kernel[i], stride, pad)?
            };
        }
        Ok(ConvDims {
            batch: xs[0],
            c_in,
            c_out,
            input,
            output,
            kernel,
            stride,
            pad,
        })
    }

    /// 3D cross-correlation. x: [N, Ci, D, H, W], w: [Co, Ci, kd, kh, kw].
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let dims = self.conv_dims("conv3d", x, w, stride, pad, false)?;
        let data = kernels::conv3d_fwd(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &dims);
        let shape = [dims.batch, dims.c_out, dims.output[0], dims.output[1], dims.output[2]];
        let value = NdArray::from_vec(&shape, data)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, ng, Payload::Conv3d { x, w, dims }))
    }

    /// Adjoint of conv3d. x: [N, Ci, D, H, W], w: [Ci, Co, kd, kh, kw].
    pub fn conv3d_transpose(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let dims = self.conv_dims("conv3d_transpose", x, w, stride, pad, true)?;
        let data =
            kernels::conv3d_transpose_fwd(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), &dims);
        let shape = [dims.batch, dims.c_out, dims.output[0], dims.output[1], dims.output[2]];
        let value = NdArray::from_vec(&shape, data)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(value, ng, Payload::Conv3dTranspose { x, w, dims }))
    }

    // ---- nonlinearities ------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(value, ng, Payload::Relu { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.map(gelu_fwd);
        let ng = self.needs(x);
        self.push(value, ng, Payload::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let value = self.nodes[x.0].value.map(|v| one / (one + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, ng, Payload::Sigmoid { x })
    }

    /// Numerically stabilized softmax along `axis`. `-inf` inputs are allowed
    /// (they produce exact zeros); NaN inputs are rejected.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(GradError::InvalidParameter {
                op: "softmax",
                message: format!("axis {axis} out of range for rank {}", xv.rank()),
            });
        }
        if xv.has_nan() {
            return Err(GradError::Numeric {
                op: "softmax",
                message: "NaN in input".into(),
            });
        }
        let value = softmax_array(xv, axis);
        let ng = self.needs(x);
        Ok(self.push(value, ng, Payload::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let feat = *xs.last().ok_or(GradError::InvalidParameter {
            op: "layer_norm",
            message: "input must have rank >= 1".into(),
        })?;
        for other in [gain, bias] {
            let os = self.nodes[other.0].value.shape();
            if os != [feat] {
                return Err(GradError::DimensionMismatch {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: os.to_vec(),
                });
            }
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_usize(feat);
        let mut data = Vec::with_capacity(xv.len());
        for lane in xv.chunks(feat) {
            let mut mean = T::zero();
            for &v in lane {
                mean += v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in lane {
                var += (v - mean) * (v - mean);
            }
            var = var / nf;
            let inv = T::one() / (var + eps).sqrt();
            for (j, &v) in lane.iter().enumerate() {
                data.push((v - mean) * inv * gv[j] + bv[j]);
            }
        }
        let value = NdArray::from_vec(&xs, data)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, ng, Payload::LayerNorm { x, gain, bias }))
    }

    /// Row lookup: out[i, :] = table[indices[i], :].
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ts = self.nodes[table.0].value.shape();
        if ts.len() != 2 {
            return Err(GradError::InvalidParameter {
                op: "embedding_lookup",
                message: format!("table must be rank 2, got {ts:?}"),
            });
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(GradError::Index {
                op: "embedding_lookup",
                message: format!("index {bad} out of range for table with {rows} rows"),
            });
        }
        let tv = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let value = NdArray::from_vec(&[indices.len(), width], data)?;
        let ng = self.needs(table);
        Ok(self.push(value, ng, Payload::Embedding { table, indices: indices.to_vec() }))
    }

    /// Inverted dropout: at train time keeps each element with probability
    /// `1 - rate` and rescales by `1/(1 - rate)`; identity at inference.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GradError::InvalidParameter {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            let value = self.nodes[x.0].value.clone();
            let ng = self.needs(x);
            return Ok(self.push(value, ng, Payload::Dropout { x, mask: None }));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask_data: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = NdArray::from_vec(self.nodes[x.0].value.shape(), mask_data)?;
        let data = self.nodes[x.0]
            .value
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let value = NdArray::from_vec(self.nodes[x.0].value.shape(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, ng, Payload::Dropout { x, mask: Some(mask) }))
    }

    // ---- losses and reductions ----------------------------------------------

    /// Mean over rows of -log softmax(logits)[target]. logits: [P, V].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ls = self.nodes[logits.0].value.shape();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(GradError::DimensionMismatch {
                op: "cross_entropy",
                lhs: ls.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let vocab = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(GradError::Index {
                op: "cross_entropy",
                message: format!("target {bad} out of range for vocabulary {vocab}"),
            });
        }
        let lv = self.nodes[logits.0].value.data();
        let rows = targets.len();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let mut m = row[0];
            for &v in row {
                m = m.max(v);
            }
            let mut denom = T::zero();
            for &v in row {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[r * vocab + j] = (v - lse).exp();
            }
            loss += lse - row[t];
        }
        loss = loss / T::from_usize(rows);
        let value = NdArray::scalar(loss);
        let ng = self.needs(logits);
        Ok(self.push(
            value,
            ng,
            Payload::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Mean squared error between equal-shaped arrays.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mse", a, b)?;
        let n = T::from_usize(self.nodes[a.0].value.len());
        let mut acc = T::zero();
        for (&x, &y) in self.nodes[a.0].value.iter().zip(self.nodes[b.0].value.iter()) {
            acc += (x - y) * (x - y);
        }
        let value = NdArray::scalar(acc / n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Payload::Mse { a, b }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.iter() {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(NdArray::scalar(acc), ng, Payload::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::from_usize(self.nodes[x.0].value.len());
        let mut acc = T::zero();
        for &v in self.nodes[x.0].value.iter() {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(NdArray::scalar(acc / n), ng, Payload::Mean { x })
    }

    /// Mean over the spatial axes of [N, C, D, H, W] -> [N, C].
    pub fn global_avg_pool3d(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 5 {
            return Err(GradError::InvalidParameter {
                op: "global_avg_pool3d",
                message: format!("expected rank-5 input, got {xs:?}"),
            });
        }
        let spatial = xs[2] * xs[3] * xs[4];
        let inv = T::one() / T::from_usize(spatial);
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(xs[0] * xs[1]);
        for chunk in xv.chunks(spatial) {
            let mut acc = T::zero();
            for &v in chunk {
                acc += v;
            }
            data.push(acc * inv);
        }
        let value = NdArray::from_vec(&[xs[0], xs[1]], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, ng, Payload::GlobalAvgPool3d { x }))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Walks nodes in reverse topological
    /// order exactly once and adds this pass's gradients into each node's
    /// accumulator.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(GradError::Contract {
                op: "backward",
                message: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        let mut scratch: Vec<Option<NdArray<T>>> = (0..=loss.0).map(|_| None).collect();
        scratch[loss.0] = Some(NdArray::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            for (input, contribution) in self.local_grads(i, &g) {
                match &mut scratch[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs, given the
    /// upstream gradient `g` for node `i`.
    fn local_grads(&self, i: usize, g: &NdArray<T>) -> Vec<(NodeId, NdArray<T>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(NodeId, NdArray<T>)> = Vec::new();
        match &node.op {
            Payload::Leaf | Payload::Detach { .. } => {}
            Payload::Add { a, b } => {
                if self.nodes[a.0].needs_grad {
                    out.push((*a, g.clone()));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, g.clone()));
                }
            }
            Payload::Sub { a, b } => {
                if self.nodes[a.0].needs_grad {
                    out.push((*a, g.clone()));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Payload::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    let da = zip_map(g, vb, |gv, bv| gv * bv);
                    out.push((*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = zip_map(g, va, |gv, av| gv * av);
                    out.push((*b, db));
                }
            }
            Payload::Neg { x } => {
                if self.nodes[x.0].needs_grad {
                    out.push((*x, g.map(|v| -v)));
                }
            }
            Payload::Scale { x, c } => {
                let c = *c;
                if self.nodes[x.0].needs_grad {
                    out.push((*x, g.map(|v| v * c)));
                }
            }
            Payload::AddBias { x, bias, axis } => {
                if self.nodes[x.0].needs_grad {
                    out.push((*x, g.clone()));
                }
                if self.nodes[bias.0].needs_grad {
                    let xs = node.value.shape();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let lane = xs[*axis];
                    let mut db = NdArray::zeros(&[lane]);
                    for (i, &gv) in g.iter().enumerate() {
                        db.data_mut()[(i / inner) % lane] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Payload::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let dims = MatmulDims::resolve(va.shape(), vb.shape()).expect("validated at forward");
                if self.nodes[a.0].needs_grad {
                    out.push((*a, matmul_grad_a(g, vb, &dims)));
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, matmul_grad_b(va, g, &dims)));
                }
            }
            Payload::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                if self.nodes[x.0].needs_grad {
                    out.push((*x, permute_array(g, &inverse)));
                }
            }
            Payload::Reshape { x } => {
                let xs = self.nodes[x.0].value.shape();
                let dx = NdArray::from_vec(xs, g.data().to_vec()).expect("same length");
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
            }
            Payload::Conv3d { x, w, dims } => {
                if self.nodes[x.0].needs_grad {
                    let data = kernels::conv3d_grad_x(g.data(), self.nodes[w.0].value.data(), dims);
                    let dx = NdArray::from_vec(self.nodes[x.0].value.shape(), data).expect("shape");
                    out.push((*x, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let data = kernels::conv3d_grad_w(self.nodes[x.0].value.data(), g.data(), dims);
                    let dw = NdArray::from_vec(self.nodes[w.0].value.shape(), data).expect("shape");
                    out.push((*w, dw));
                }
            }
            Payload::Conv3dTranspose { x, w, dims } => {
                if self.nodes[x.0].needs_grad {
                    let data = kernels::conv3d_transpose_grad_x(g.data(), self.nodes[w.0].value.data(), dims);
                    let dx = NdArray::from_vec(self.nodes[x.0].value.shape(), data).expect("shape");
                    out.push((*x, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let data = kernels::conv3d_transpose_grad_w(self.nodes[x.0].value.data(), g.data(), dims);
                    let dw = NdArray::from_vec(self.nodes[w.0].value.shape(), data).expect("shape");
                    out.push((*w, dw));
                }
            }
            Payload::Relu { x } => {
                let dx = zip_map(g, &self.nodes[x.0].value, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
            }
            Payload::Gelu { x } => {
                let dx = zip_map(g, &self.nodes[x.0].value, |gv, xv| gv * gelu_bwd(xv));
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
            }
            Payload::Sigmoid { x } => {
                let dx = zip_map(g, &node.value, |gv, yv| gv * yv * (T::one() - yv));
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
            }
            Payload::Softmax { x, axis } => {
                if self.nodes[x.0].needs_grad {
                    out.push((*x, softmax_grad(g, &node.value, *axis)));
                }
            }
            Payload::LayerNorm { x, gain, bias } => {
                let (dx, dgain, dbias) = layer_norm_grad(
                    g,
                    &self.nodes[x.0].value,
                    &self.nodes[gain.0].value,
                );
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
                if self.nodes[gain.0].needs_grad {
                    out.push((*gain, dgain));
                }
                if self.nodes[bias.0].needs_grad {
                    out.push((*bias, dbias));
                }
            }
            Payload::Embedding { table, indices } => {
                if self.nodes[table.0].needs_grad {
                    let ts = self.nodes[table.0].value.shape();
                    let width = ts[1];
                    let mut dt = NdArray::zeros(ts);
                    for (row, &idx) in indices.iter().enumerate() {
                        let src = &g.data()[row * width..(row + 1) * width];
                        let dst = &mut dt.data_mut()[idx * width..(idx + 1) * width];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Payload::Dropout { x, mask } => {
                let dx = match mask {
                    None => g.clone(),
                    Some(m) => zip_map(g, m, |gv, mv| gv * mv),
                };
                if self.nodes[x.0].needs_grad {
                    out.push((*x, dx));
                }
            }
            Payload::CrossEntropy { logits, targets, probs } => {
                if self.nodes[logits.0].needs_grad {
                    let gval = g.scalar_value();
                    let ls = self.nodes[logits.0].value.shape();
                    let vocab = ls[1];
                    let inv_rows = T::one() / T::from_usize(targets.len());
                    let mut data = Vec::with_capacity(probs.len());
                    for (idx, &p) in probs.iter().enumerate() {
                        let (r, v) = (idx / vocab, idx % vocab);
                        let delta = if targets[r] == v { T::one() } else { T::zero() };
                        data.push((p - delta) * inv_rows * gval);
                    }
                    let dl = NdArray::from_vec(ls, data).expect("shape");
                    out.push((*logits, dl));
                }
            }
            Payload::Mse { a, b } => {
                let gval = g.scalar_value();
                let n = T::from_usize(self.nodes[a.0].value.len());
                let coeff = T::from_f64(2.0) / n * gval;
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].needs_grad {
                    let da = zip_map(va, vb, |x, y| coeff * (x - y));
                    out.push((*a, da));
                }
                if self.nodes[b.0].needs_grad {
                    let db = zip_map(va, vb, |x, y| -coeff * (x - y));
                    out.push((*b, db));
                }
            }
            Payload::Sum { x } => {
                let gval = g.scalar_value();
                if self.nodes[x.0].needs_grad {
                    out.push((*x, NdArray::full(self.nodes[x.0].value.shape(), gval)));
                }
            }
            Payload::Mean { x } => {
                let n = T::from_usize(self.nodes[x.0].value.len());
                let gval = g.scalar_value() / n;
                if self.nodes[x.0].needs_grad {
                    out.push((*x, NdArray::full(self.nodes[x.0].value.shape(), gval)));
                }
            }
            Payload::GlobalAvgPool3d { x } => {
                if self.nodes[x.0].needs_grad {
                    let xs = self.nodes[x.0].value.shape();
                    let spatial = xs[2] * xs[3] * xs[4];
                    let inv = T::one() / T::from_usize(spatial);
                    let mut data = Vec::with_capacity(self.nodes[x.0].value.len());
                    for &gv in g.iter() {
                        let v = gv * inv;
                        data.extend(std::iter::repeat_n(v, spatial));
                    }
                    out.push((*x, NdArray::from_vec(xs, data).expect("shape")));
                }
            }
        }
        out
    }
}

fn zip_map<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>, f: impl Fn(T, T) -> T) -> NdArray<T> {
    debug_assert_eq!(a.len(), b.len());
    let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::from_vec(a.shape(), data).expect("same shape")
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x.powi(3));
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

fn permute_array<T: Scalar>(x: &NdArray<T>, axes: &[usize]) -> NdArray<T> {
    let xs = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
    let in_strides = x.strides();
    // stride in the input for each output axis
    let map_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.len() {
        data.push(x.data()[src]);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += map_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= map_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    NdArray::from_vec(&out_shape, data).expect("permutation preserves length")
}

fn softmax_array<T: Scalar>(x: &NdArray<T>, axis: usize) -> NdArray<T> {
    let shape = x.shape();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xv = x.data();
    let mut data = vec![T::zero(); xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut m = xv[base];
            for l in 1..lane {
                m = m.max(xv[base + l * inner]);
            }
            let mut denom = T::zero();
            for l in 0..lane {
                denom += (xv[base + l * inner] - m).exp();
            }
            for l in 0..lane {
                data[base + l * inner] = (xv[base + l * inner] - m).exp() / denom;
            }
        }
    }
    NdArray::from_vec(shape, data).expect("shape preserved")
}

fn softmax_grad<T: Scalar>(g: &NdArray<T>, y: &NdArray<T>, axis: usize) -> NdArray<T> {
    let shape = y.shape();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let (gv, yv) = (g.data(), y.data());
    let mut data = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut dot = T::zero();
            for l in 0..lane {
                dot += gv[base + l * inner] * yv[base + l * inner];
            }
            for l in 0..lane {
                let k = base + l * inner;
                data[k] = yv[k] * (gv[k] - dot);
            }
        }
    }
    NdArray::from_vec(shape, data).expect("shape preserved")
}

fn layer_norm_grad<T: Scalar>(
    g: &NdArray<T>,
    x: &NdArray<T>,
    gain: &NdArray<T>,
) -> (NdArray<T>, NdArray<T>, NdArray<T>) {
    let feat = *x.shape().last().unwrap();
    let nf = T::from_usize(feat);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let (gv, xv, gainv) = (g.data(), x.data(), gain.data());
    let mut dx = vec![T::zero(); xv.len()];
    let mut dgain = vec![T::zero(); feat];
    let mut dbias = vec![T::zero(); feat];
    for (lane_idx, lane) in xv.chunks(feat).enumerate() {
        let base = lane_idx * feat;
        let mut mean = T::zero();
        for &v in lane {
            mean += v;
        }
        mean = mean / nf;
        let mut var = T::zero();
        for &v in lane {
            var += (v - mean) * (v - mean);
        }
        var = var / nf;
        let inv = T::one() / (var + eps).sqrt();
        // xhat = (x - mean) * inv; dxhat = g * gain
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..feat {
            let xhat = (lane[j] - mean) * inv;
            let dxhat = gv[base + j] * gainv[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[j] += gv[base + j] * xhat;
            dbias[j] += gv[base + j];
        }
        for j in 0..feat {
            let xhat = (lane[j] - mean) * inv;
            let dxhat = gv[base + j] * gainv[j];
            dx[base + j] = inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
        }
    }
    (
        NdArray::from_vec(x.shape(), dx).expect("shape"),
        NdArray::from_vec(&[feat], dgain).expect("shape"),
        NdArray::from_vec(&[feat], dbias).expect("shape"),
    )
}

/// Resolved batched-matmul geometry.
struct MatmulDims {
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

impl MatmulDims {
    fn resolve(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(GradError::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let a_batch = sa[..sa.len() - 2].to_vec();
        let b_batch = sb[..sb.len() - 2].to_vec();
        let rank = a_batch.len().max(b_batch.len());
        let mut batch = vec![0usize; rank];
        for i in 0..rank {
            let da = a_batch.get(a_batch.len().wrapping_sub(rank - i)).copied().unwrap_or(1);
            let db = b_batch.get(b_batch.len().wrapping_sub(rank - i)).copied().unwrap_or(1);
            batch[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(GradError::DimensionMismatch {
                        op: "matmul",
                        lhs: sa.to_vec(),
                        rhs: sb.to_vec(),
                    })
                }
            };
        }
        Ok(MatmulDims { batch, a_batch, b_batch, m, k, n })
    }

    fn batch_len(&self) -> usize {
        self.batch.iter().product()
    }

    /// Flat offset into an operand with `dims` batch shape for broadcast
    /// batch index `idx` (right-aligned).
    fn operand_offset(&self, dims: &[usize], idx: usize) -> usize {
        if dims.is_empty() {
            return 0;
        }
        let rank = self.batch.len();
        let mut rem = idx;
        let mut coords = vec![0usize; rank];
        for d in (0..rank).rev() {
            coords[d] = rem % self.batch[d];
            rem /= self.batch[d];
        }
        let offset_rank = dims.len();
        let mut flat = 0usize;
        let mut stride = 1usize;
        for d in (0..offset_rank).rev() {
            let full_d = rank - offset_rank + d;
            let c = if dims[d] == 1 { 0 } else { coords[full_d] };
            flat += c * stride;
            stride *= dims[d];
        }
        flat
    }
}

fn matmul_batched<T: Scalar>(a: &NdArray<T>, b: &NdArray<T>, dims: &MatmulDims) -> NdArray<T> {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let batches = dims.batch_len();
    let mut out_shape = dims.batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut data = vec![T::zero(); batches * m * n];
    if batches == 1 {
        kernels::matmul2d(a.data(), b.data(), m, k, n, &mut data);
    } else {
        use rayon::prelude::*;
        data.par_chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| {
            let ao = dims.operand_offset(&dims.a_batch, bi) * m * k;
            let bo = dims.operand_offset(&dims.b_batch, bi) * k * n;
            kernels::matmul2d(&a.data()[ao..ao + m * k], &b.data()[bo..bo + k * n], m, k, n, chunk);
        });
    }
    NdArray::from_vec(&out_shape, data).expect("computed shape")
}

fn matmul_grad_a<T: Scalar>(g: &NdArray<T>, b: &NdArray<T>, dims: &MatmulDims) -> NdArray<T> {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let mut a_shape = dims.a_batch.clone();
    a_shape.push(m);
    a_shape.push(k);
    let mut data = vec![T::zero(); a_shape.iter().product()];
    let broadcast = dims.a_batch.iter().product::<usize>() != dims.batch_len();
    if !broadcast && dims.batch_len() > 1 {
        use rayon::prelude::*;
        data.par_chunks_mut(m * k).enumerate().for_each(|(bi, chunk)| {
            let go = bi * m * n;
            let bo = dims.operand_offset(&dims.b_batch, bi) * k * n;
            kernels::matmul2d_nt(&g.data()[go..go + m * n], &b.data()[bo..bo + k * n], m, n, k, chunk);
        });
    } else {
        for bi in 0..dims.batch_len() {
            let go = bi * m * n;
            let bo = dims.operand_offset(&dims.b_batch, bi) * k * n;
            let ao = dims.operand_offset(&dims.a_batch, bi) * m * k;
            kernels::matmul2d_nt(
                &g.data()[go..go + m * n],
                &b.data()[bo..bo + k * n],
                m,
                n,
                k,
                &mut data[ao..ao + m * k],
            );
        }
    }
    NdArray::from_vec(&a_shape, data).expect("computed shape")
}

fn matmul_grad_b<T: Scalar>(a: &NdArray<T>, g: &NdArray<T>, dims: &MatmulDims) -> NdArray<T> {
    let (m, k, n) = (dims.m, dims.k, dims.n);
    let mut b_shape = dims.b_batch.clone();
    b_shape.push(k);
    b_shape.push(n);
    let mut data = vec![T::zero(); b_shape.iter().product()];
    let broadcast = dims.b_batch.iter().product::<usize>() != dims.batch_len();
    if !broadcast && dims.batch_len() > 1 {
        use rayon::prelude::*;
        data.par_chunks_mut(k * n).enumerate().for_each(|(bi, chunk)| {
            let go = bi * m * n;
            let ao = dims.operand_offset(&dims.a_batch, bi) * m * k;
            kernels::matmul2d_tn(&a.data()[ao..ao + m * k], &g.data()[go..go + m * n], m, k, n, chunk);
        });
    } else {
        for bi in 0..dims.batch_len() {
            let go = bi * m * n;
            let ao = dims.operand_offset(&dims.a_batch, bi) * m * k;
            let bo = dims.operand_offset(&dims.b_batch, bi) * k * n;
            kernels::matmul2d_tn(
                &a.data()[ao..ao + m * k],
                &g.data()[go..go + m * n],
                m,
                k,
                n,
                &mut data[bo..bo + k * n],
            );
        }
    }
    NdArray::from_vec(&b_shape, data).expect("computed shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray<f64> {
        NdArray::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(arr(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(arr(&[2], &[0.0, 3.0f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(GradError::Numeric { .. })));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(arr(&[1, 4], &[0.0; 4]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(loss).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(arr(&[1, 3], &[100.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).scalar_value() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(arr(&[1, 3], &[0.0; 3]));
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(GradError::Index { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_lane_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[3], &[1.0, 1.0, 1.0]));
        let gain = tape.constant(arr(&[3], &[1.0, 1.0, 1.0]));
        let bias = tape.constant(arr(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[4], &[1.0, -2.0, 3.0, 4.5]));
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[2], &[1.0, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[2], &[1.0, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let first = tape.grad(p).unwrap().clone();
        tape.backward(loss).unwrap();
        let second = tape.grad(p).unwrap();
        for (a, b) in first.iter().zip(second.iter()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(p),
            Err(GradError::Contract { .. })
        ));
    }

    #[test]
    fn unreachable_parameter_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[2], &[1.0, 2.0]));
        let q = tape.param(arr(&[2], &[5.0, 6.0]));
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(q).is_none());
        assert_eq!(tape.grad_or_zeros(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(arr(&[2], &[1.0, 2.0]));
        let d = tape.detach(p);
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert!(tape.grad(p).is_none());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(NdArray::zeros(&[2, 3]));
        let b = tape.constant(NdArray::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(GradError::DimensionMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv3d_trivial_cases() {
        let mut tape = Tape::<f64>::new();
        // 1x1x1^3 input [5], kernel [2] -> [10]
        let x = tape.constant(arr(&[1, 1, 1, 1, 1], &[5.0]));
        let w = tape.constant(arr(&[1, 1, 1, 1, 1], &[2.0]));
        let y = tape.conv3d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);

        // all-ones 3^3 input and kernel -> [27]
        let x = tape.constant(NdArray::full(&[1, 1, 3, 3, 3], 1.0));
        let w = tape.constant(NdArray::full(&[1, 1, 3, 3, 3], 1.0));
        let y = tape.conv3d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[27.0]);
    }

    #[test]
    fn conv3d_transpose_paints_block() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[1, 1, 1, 1, 1], &[3.0]));
        let w = tape.constant(NdArray::full(&[1, 1, 2, 2, 2], 1.0));
        let y = tape.conv3d_transpose(x, w, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2, 2]);
        for &v in tape.value(y).data() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn conv_roundtrip_extents_k2_s2() {
        // conv3d(conv3d_transpose(x)) restores spatial extents for k=2, s=2, p=0
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(NdArray::full(&[1, 1, 3, 4, 5], 1.0));
        let wt = tape.constant(NdArray::full(&[1, 1, 2, 2, 2], 1.0));
        let up = tape.conv3d_transpose(x, wt, 2, 0).unwrap();
        assert_eq!(tape.value(up).shape(), &[1, 1, 6, 8, 10]);
        let wc = tape.constant(NdArray::full(&[1, 1, 2, 2, 2], 1.0));
        let down = tape.conv3d(up, wc, 2, 0).unwrap();
        assert_eq!(tape.value(down).shape(), &[1, 1, 3, 4, 5]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let z = tape.permute(y, &[1, 0]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let mut tape = Tape::<f64>::new();
        // a: [2, 1, 2] batch of row vectors, b: [2, 2] shared matrix
        let a = tape.constant(arr(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
