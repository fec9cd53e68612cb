//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! The graph is rebuilt on every forward pass and is consumable by exactly
//! one backward call, which visits nodes in reverse insertion order (insertion
//! order is topological by construction). Reductions accumulate in f64;
//! elementwise math and storage stay f32.

use super::kernels;
use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    tensor: Tensor,
    needs_grad: bool,
    op: Op,
}

#[allow(clippy::upper_case_acronyms)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        pad: usize,
        /// im2col buffers, one [cin*kh*kw, oh*ow] block per sample.
        cols: Vec<f32>,
        dims: ConvDims,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
        /// length of one bias-broadcast block (h*w for conv, 1 for rows)
        inner: usize,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
        planes: usize,
        h: usize,
        w: usize,
    },
    Reshape {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    ScalarMul {
        input: NodeId,
        scalar: f32,
    },
    SoftmaxT {
        input: NodeId,
        t: f32,
    },
    CrossEntropyLogits {
        logits: NodeId,
        labels: Vec<u32>,
    },
    CrossEntropySoft {
        logits: NodeId,
        targets: NodeId,
    },
    Sum {
        input: NodeId,
    },
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

/// Define-by-run compute graph.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    /// Insert a leaf tensor; its `requires_grad` flag marks it as a gradient
    /// target for backward.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad;
        self.push(tensor, needs, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last backward pass w.r.t. this node, if one was
    /// computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    // ---- forward ops -------------------------------------------------

    /// A[m,k] @ B[k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs {sa:?} x rhs {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm(m, k, n, 1.0, self.data(a), self.data(b), 0.0, &mut out);
        let t = Tensor { shape: vec![m, n], data: out, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::MatMul { a, b, m, k, n }))
    }

    /// Stride-1 zero-padded convolution of [n,cin,h,w] with [cout,cin,kh,kw].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        pad: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {si:?} x kernel {sk:?}"),
            });
        }
        let (n, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} pad {pad}"),
            });
        }
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let dims = ConvDims { n, cin, h, w, cout, kh, kw, oh, ow };
        let ckk = cin * kh * kw;
        let block = ckk * oh * ow;
        let mut cols = vec![0.0f32; n * block];
        let mut out = vec![0.0f32; n * cout * oh * ow];
        let kdata = self.data(kernel).to_vec();
        let idata = self.data(input);
        for i in 0..n {
            let col = &mut cols[i * block..(i + 1) * block];
            kernels::im2col(&idata[i * cin * h * w..(i + 1) * cin * h * w], cin, h, w, kh, kw, pad, col);
            kernels::sgemm(
                cout,
                ckk,
                oh * ow,
                1.0,
                &kdata,
                col,
                0.0,
                &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow],
            );
        }
        let t = Tensor { shape: vec![n, cout, oh, ow], data: out, requires_grad: false, grad: None };
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(t, needs, Op::Conv2d { input, kernel, pad, cols, dims }))
    }

    /// Bias broadcast: [rows, c] + [c], or [n, c, h, w] + [c] per channel.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (si, sb) = (self.shape(input).to_vec(), self.shape(bias).to_vec());
        let c = if sb.len() == 1 { sb[0] } else { 0 };
        let inner = match si.len() {
            2 if si[1] == c => 1,
            4 if si[1] == c => si[2] * si[3],
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bias_add",
                    detail: format!("input {si:?} x bias {sb:?}"),
                })
            }
        };
        let bdata = self.data(bias).to_vec();
        let mut out = self.data(input).to_vec();
        for chunk in out.chunks_mut(c * inner) {
            for (ch, seg) in chunk.chunks_mut(inner).enumerate() {
                let b = bdata[ch];
                for v in seg {
                    *v += b;
                }
            }
        }
        let t = Tensor { shape: si, data: out, requires_grad: false, grad: None };
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(t, needs, Op::BiasAdd { input, bias, inner }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut t = self.nodes[input.0].tensor.clone();
        t.grad = None;
        for v in &mut t.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let needs = self.needs(input);
        self.push(t, needs, Op::Relu { input })
    }

    /// 2x2 max pool, stride 2, on [n, c, h, w] with even h, w.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(AutodiffError::ShapeMismatch {
                op: "maxpool2x2",
                detail: format!("input {s:?} (need rank 4 with even h, w)"),
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = kernels::maxpool2x2(self.data(input), n, c, h, w);
        let t = Tensor { shape: vec![n, c, h / 2, w / 2], data: out, requires_grad: false, grad: None };
        let needs = self.needs(input);
        Ok(self.push(t, needs, Op::MaxPool2x2 { input, argmax, planes: n * c, h, w }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != self.data(input).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(input)),
            });
        }
        let t = Tensor { shape, data: self.data(input).to_vec(), requires_grad: false, grad: None };
        let needs = self.needs(input);
        Ok(self.push(t, needs, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let bd = self.data(b).to_vec();
        let mut out = self.data(a).to_vec();
        match op {
            "add" => out.iter_mut().zip(&bd).for_each(|(x, y)| *x += y),
            "sub" => out.iter_mut().zip(&bd).for_each(|(x, y)| *x -= y),
            _ => out.iter_mut().zip(&bd).for_each(|(x, y)| *x *= y),
        }
        let t = Tensor { shape: self.shape(a).to_vec(), data: out, requires_grad: false, grad: None };
        let needs = self.needs(a) || self.needs(b);
        let node_op = match op {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(t, needs, node_op))
    }

    pub fn scalar_mul(&mut self, input: NodeId, scalar: f32) -> NodeId {
        let mut t = self.nodes[input.0].tensor.clone();
        t.grad = None;
        for v in &mut t.data {
            *v *= scalar;
        }
        let needs = self.needs(input);
        self.push(t, needs, Op::ScalarMul { input, scalar })
    }

    /// Row-wise softmax(logits / t) over [rows, classes], numerically
    /// stabilised by max subtraction; row sums accumulate in f64.
    pub fn softmax_t(&mut self, logits: NodeId, t: f64) -> Result<NodeId, AutodiffError> {
        if t <= 0.0 || !t.is_finite() {
            return Err(AutodiffError::BadTemperature(t));
        }
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_t",
                detail: format!("logits {s:?} (need rank 2)"),
            });
        }
        let classes = s[1];
        let mut out = vec![0.0f32; s[0] * classes];
        for (row_in, row_out) in self.data(logits).chunks(classes).zip(out.chunks_mut(classes)) {
            let m = row_in.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v / t as f32));
            let mut sum = 0.0f64;
            for (o, &z) in row_out.iter_mut().zip(row_in) {
                let e = (z / t as f32 - m).exp();
                *o = e;
                sum += e as f64;
            }
            for o in row_out {
                *o = (*o as f64 / sum) as f32;
            }
        }
        let tensor = Tensor { shape: s, data: out, requires_grad: false, grad: None };
        let needs = self.needs(logits);
        Ok(self.push(tensor, needs, Op::SoftmaxT { input: logits, t: t as f32 }))
    }

    /// Mean over rows of softmax cross-entropy computed directly from logits.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_logits",
                detail: format!("logits {s:?} x {} labels", labels.len()),
            });
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_logits",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let mut total = 0.0f64;
        for (row, &y) in self.data(logits).chunks(classes).zip(labels) {
            total += row_logsumexp(row) - row[y] as f64;
        }
        let loss = (total / labels.len() as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropyLogits { logits, labels: labels.iter().map(|&l| l as u32).collect() },
        ))
    }

    /// Mean over rows of cross-entropy against a full target distribution
    /// (soft labels). Targets do not receive gradients.
    pub fn cross_entropy_soft(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (s, st) = (self.shape(logits).to_vec(), self.shape(targets).to_vec());
        if s.len() != 2 || s != st {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_soft",
                detail: format!("logits {s:?} x targets {st:?}"),
            });
        }
        let classes = s[1];
        let mut total = 0.0f64;
        for (row, trow) in self.data(logits).chunks(classes).zip(self.data(targets).chunks(classes)) {
            let lse = row_logsumexp(row);
            for (&z, &q) in row.iter().zip(trow) {
                if q != 0.0 {
                    total += q as f64 * (lse - z as f64);
                }
            }
        }
        let loss = (total / s[0] as f64) as f32;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), needs, Op::CrossEntropySoft { logits, targets }))
    }

    /// Sum of all elements (f64 accumulation) as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.data(input).iter().map(|&v| v as f64).sum();
        let needs = self.needs(input);
        self.push(Tensor::scalar(total as f32), needs, Op::Sum { input })
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of `loss` w.r.t. every requires-grad leaf.
    ///
    /// The loss must be scalar and finite; a graph can be differentiated
    /// exactly once per forward construction.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let lt = &self.nodes[loss.0].tensor;
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape.clone()));
        }
        if !lt.data[0].is_finite() {
            return Err(AutodiffError::NonFinite("loss".to_string()));
        }
        self.consumed = true;
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].tensor.grad.is_none() {
                continue;
            }
            self.backprop_node(i);
        }

        // Every requires-grad leaf ends populated, even if disconnected.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.tensor.requires_grad {
                if node.tensor.grad.is_none() {
                    node.tensor.grad = Some(vec![0.0; node.tensor.data.len()]);
                }
                if node.tensor.grad.as_ref().unwrap().iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite("leaf gradient".to_string()));
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let (head, tail) = self.nodes.split_at_mut(i);
        let node = &mut tail[0];
        let g = node.tensor.grad.as_ref().expect("checked above");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if head[a.0].needs_grad {
                    // dA += g [m,n] @ B^T [n,k]
                    let bd = head[b.0].tensor.data.clone();
                    let da = grad_buf(&mut head[a.0], m * k);
                    sgemm_nt(m, n, k, g, &bd, da);
                }
                if head[b.0].needs_grad {
                    // dB += A^T [k,m] @ g [m,n]
                    let ad = head[a.0].tensor.data.clone();
                    let db = grad_buf(&mut head[b.0], k * n);
                    sgemm_tn(k, m, n, &ad, g, db);
                }
            }
            Op::Conv2d { input, kernel, pad, cols, dims } => {
                let d = *dims;
                let (input, kernel, pad) = (*input, *kernel, *pad);
                let ckk = d.cin * d.kh * d.kw;
                let block = ckk * d.oh * d.ow;
                let out_block = d.cout * d.oh * d.ow;
                if head[kernel.0].needs_grad {
                    let dw = grad_buf(&mut head[kernel.0], d.cout * ckk);
                    for s in 0..d.n {
                        // dW += g_s [cout, oh*ow] @ cols_s^T [oh*ow, ckk]
                        sgemm_nt(
                            d.cout,
                            d.oh * d.ow,
                            ckk,
                            &g[s * out_block..(s + 1) * out_block],
                            &cols[s * block..(s + 1) * block],
                            dw,
                        );
                    }
                }
                if head[input.0].needs_grad {
                    let kdata = head[kernel.0].tensor.data.clone();
                    let dx = grad_buf(&mut head[input.0], d.n * d.cin * d.h * d.w);
                    let mut dcol = vec![0.0f32; block];
                    for s in 0..d.n {
                        // dcols_s = K^T [ckk, cout] @ g_s [cout, oh*ow]
                        dcol.fill(0.0);
                        sgemm_tn(ckk, d.cout, d.oh * d.ow, &kdata, &g[s * out_block..(s + 1) * out_block], &mut dcol);
                        kernels::col2im_add(
                            &dcol,
                            d.cin,
                            d.h,
                            d.w,
                            d.kh,
                            d.kw,
                            pad,
                            &mut dx[s * d.cin * d.h * d.w..(s + 1) * d.cin * d.h * d.w],
                        );
                    }
                }
            }
            Op::BiasAdd { input, bias, inner } => {
                let (input, bias, inner) = (*input, *bias, *inner);
                if head[input.0].needs_grad {
                    let dx = grad_buf(&mut head[input.0], g.len());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if head[bias.0].needs_grad {
                    let c = head[bias.0].tensor.data.len();
                    let db = grad_buf(&mut head[bias.0], c);
                    for chunk in g.chunks(c * inner) {
                        for (ch, seg) in chunk.chunks(inner).enumerate() {
                            let mut acc = 0.0f64;
                            for &v in seg {
                                acc += v as f64;
                            }
                            db[ch] += acc as f32;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if head[input.0].needs_grad {
                    let out = &node.tensor.data;
                    let mask: Vec<f32> =
                        out.iter().zip(g).map(|(&o, &gv)| if o > 0.0 { gv } else { 0.0 }).collect();
                    let dx = grad_buf(&mut head[input.0], mask.len());
                    for (d, s) in dx.iter_mut().zip(&mask) {
                        *d += s;
                    }
                }
            }
            Op::MaxPool2x2 { input, argmax, planes, h, w } => {
                let (input, planes, h, w) = (*input, *planes, *h, *w);
                if head[input.0].needs_grad {
                    let per_plane = (h / 2) * (w / 2);
                    let dx = grad_buf(&mut head[input.0], planes * h * w);
                    for p in 0..planes {
                        for o in 0..per_plane {
                            let src = p * per_plane + o;
                            dx[p * h * w + argmax[src] as usize] += g[src];
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if head[input.0].needs_grad {
                    let dx = grad_buf(&mut head[input.0], g.len());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if head[id.0].needs_grad {
                        let dx = grad_buf(&mut head[id.0], g.len());
                        for (d, s) in dx.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                if head[a.0].needs_grad {
                    let dx = grad_buf(&mut head[a.0], g.len());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if head[b.0].needs_grad {
                    let dx = grad_buf(&mut head[b.0], g.len());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if head[a.0].needs_grad {
                    let bd = head[b.0].tensor.data.clone();
                    let dx = grad_buf(&mut head[a.0], g.len());
                    for ((d, s), o) in dx.iter_mut().zip(g).zip(&bd) {
                        *d += s * o;
                    }
                }
                if head[b.0].needs_grad {
                    let ad = head[a.0].tensor.data.clone();
                    let dx = grad_buf(&mut head[b.0], g.len());
                    for ((d, s), o) in dx.iter_mut().zip(g).zip(&ad) {
                        *d += s * o;
                    }
                }
            }
            Op::ScalarMul { input, scalar } => {
                let (input, scalar) = (*input, *scalar);
                if head[input.0].needs_grad {
                    let dx = grad_buf(&mut head[input.0], g.len());
                    for (d, s) in dx.iter_mut().zip(g) {
                        *d += s * scalar;
                    }
                }
            }
            Op::SoftmaxT { input, t } => {
                let (input, t) = (*input, *t);
                if head[input.0].needs_grad {
                    let probs = &node.tensor.data;
                    let classes = node.tensor.shape[1];
                    let mut contrib = vec![0.0f32; probs.len()];
                    for ((p_row, g_row), c_row) in
                        probs.chunks(classes).zip(g.chunks(classes)).zip(contrib.chunks_mut(classes))
                    {
                        let dot: f64 =
                            p_row.iter().zip(g_row).map(|(&p, &gv)| p as f64 * gv as f64).sum();
                        for ((c, &p), &gv) in c_row.iter_mut().zip(p_row).zip(g_row) {
                            *c = ((p as f64 * (gv as f64 - dot)) / t as f64) as f32;
                        }
                    }
                    let dx = grad_buf(&mut head[input.0], contrib.len());
                    for (d, s) in dx.iter_mut().zip(&contrib) {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropyLogits { logits, labels } => {
                let logits = *logits;
                if head[logits.0].needs_grad {
                    let g0 = g[0];
                    let zdata = head[logits.0].tensor.data.clone();
                    let rows = labels.len();
                    let classes = zdata.len() / rows;
                    let scale = g0 as f64 / rows as f64;
                    let labels = labels.clone();
                    let dz = grad_buf(&mut head[logits.0], zdata.len());
                    for (r, (row, dz_row)) in
                        zdata.chunks(classes).zip(dz.chunks_mut(classes)).enumerate()
                    {
                        softmax_grad_row(row, dz_row, |j, p| {
                            let onehot = if j == labels[r] as usize { 1.0 } else { 0.0 };
                            ((p - onehot) * scale) as f32
                        });
                    }
                }
            }
            Op::CrossEntropySoft { logits, targets } => {
                let (logits, targets) = (*logits, *targets);
                if head[logits.0].needs_grad {
                    let g0 = g[0];
                    let zdata = head[logits.0].tensor.data.clone();
                    let qdata = head[targets.0].tensor.data.clone();
                    let classes = head[logits.0].tensor.shape[1];
                    let rows = zdata.len() / classes;
                    let scale = g0 as f64 / rows as f64;
                    let dz = grad_buf(&mut head[logits.0], zdata.len());
                    for ((row, q_row), dz_row) in
                        zdata.chunks(classes).zip(qdata.chunks(classes)).zip(dz.chunks_mut(classes))
                    {
                        softmax_grad_row(row, dz_row, |j, p| ((p - q_row[j] as f64) * scale) as f32);
                    }
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if head[input.0].needs_grad {
                    let g0 = g[0];
                    let len = head[input.0].tensor.data.len();
                    let dx = grad_buf(&mut head[input.0], len);
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
        }
    }
}

/// logsumexp of one row: exp in f32 (so temperature-inflated margins saturate
/// exactly as stored), sum in f64.
fn row_logsumexp(row: &[f32]) -> f64 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
    let sum: f64 = row.iter().map(|&z| (z - m).exp() as f64).sum();
    m as f64 + sum.ln()
}

/// Accumulate softmax-based gradients for one row of logits.
fn softmax_grad_row(row: &[f32], dz_row: &mut [f32], mut f: impl FnMut(usize, f64) -> f32) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f32; row.len()];
    for (e, &z) in exps.iter_mut().zip(row) {
        *e = (z - m).exp();
        sum += *e as f64;
    }
    for (j, (dz, &e)) in dz_row.iter_mut().zip(&exps).enumerate() {
        *dz += f(j, e as f64 / sum);
    }
}

fn grad_buf(node: &mut Node, len: usize) -> &mut Vec<f32> {
    node.tensor.grad.get_or_insert_with(|| vec![0.0; len])
}

/// C[m,n] += A[m,k] @ B[n,k]^T
fn sgemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A[k,m]^T @ B[k,n]
fn sgemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f32>, grad: bool) -> NodeId {
        g.leaf(Tensor::new(shape, data).unwrap().requires_grad(grad))
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0], false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = leaf(&mut g, vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], false);
        let a_data = vec![3., 1., 4., 1., 5., 9., 2., 6., 5.];
        let a = leaf(&mut g, vec![3, 3], a_data.clone(), false);
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data, a_data);
    }

    #[test]
    fn conv2d_all_ones_center() {
        // 5x5 ones, 3x3 ones kernel, pad 1: center output sums a full window.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 5, 5], vec![1.0; 25], false);
        let k = leaf(&mut g, vec![1, 1, 3, 3], vec![1.0; 9], false);
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y).shape, vec![1, 1, 5, 5]);
        assert_eq!(g.value(y).data[2 * 5 + 2], 9.0);
        assert_eq!(g.value(y).data[0], 4.0);
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(x*x), x = [1,2,3] -> grad [2,4,6]
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0], true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_cross_entropy_two_logits() {
        // logits [0,0], label 0: softmax = [0.5, 0.5], grad = p - onehot.
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![1, 2], vec![0.0, 0.0], true);
        let loss = g.cross_entropy_logits(z, &[0]).unwrap();
        g.backward(loss).unwrap();
        let gz = g.grad(z).unwrap();
        assert!((gz[0] + 0.5).abs() < 1e-6, "{gz:?}");
        assert!((gz[1] - 0.5).abs() < 1e-6, "{gz:?}");
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss(_)));
    }

    #[test]
    fn backward_consumes_graph() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0], true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(AutodiffError::GraphConsumed)));
    }

    #[test]
    fn softmax_temperature_examples() {
        let mut g = Graph::new();
        // equal logits -> uniform at any temperature
        let z = leaf(&mut g, vec![1, 3], vec![7.0, 7.0, 7.0], false);
        let p = g.softmax_t(z, 13.0).unwrap();
        for &v in &g.value(p).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        // [100, 0] at T=100 == softmax([1, 0])
        let z2 = leaf(&mut g, vec![1, 2], vec![100.0, 0.0], false);
        let p2 = g.softmax_t(z2, 100.0).unwrap();
        let e = std::f64::consts::E;
        let expect = e / (e + 1.0);
        assert!((g.value(p2).data[0] as f64 - expect).abs() < 1e-6);
        assert!((g.value(p2).data[1] as f64 - (1.0 - expect)).abs() < 1e-6);
        // T -> infinity: uniform
        let z3 = leaf(&mut g, vec![1, 4], vec![5.0, -3.0, 0.5, 2.0], false);
        let p3 = g.softmax_t(z3, 1e9).unwrap();
        for &v in &g.value(p3).data {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![1, 2], vec![0.0, 1.0], false);
        assert!(matches!(g.softmax_t(z, 0.0), Err(AutodiffError::BadTemperature(_))));
        assert!(matches!(g.softmax_t(z, -2.0), Err(AutodiffError::BadTemperature(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![2, 3], vec![1e4, -1e4, 3.0, 0.0, 55.5, -2.0], false);
        let p = g.softmax_t(z, 1.0).unwrap();
        for row in g.value(p).data.chunks(3) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_op_and_dims() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6], false);
        let b = leaf(&mut g, vec![2, 3], vec![0.0; 6], false);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_linearity_in_loss_scale() {
        let run = |scale: f32| {
            let mut g = Graph::new();
            let x = g.leaf(
                Tensor::rand_uniform(vec![4], -1.0, 1.0, 3).requires_grad(true),
            );
            let sq = g.mul(x, x).unwrap();
            let s = g.sum(sq);
            let loss = g.scalar_mul(s, scale);
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let g1 = run(1.0);
        let g3 = run(3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_loss_is_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![f32::NAN], true);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite(_)));
    }

    /// Independent f64 forward pass of a dense relu net, used as a
    /// finite-difference oracle for a 2-layer network.
    fn dense_net_f64(params: &[Vec<f64>], dims: &[(usize, usize)], x: &[f64], label: usize) -> f64 {
        let mut act = x.to_vec();
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &params[2 * li];
            let b = &params[2 * li + 1];
            let mut next = vec![0.0f64; fan_out];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = b[j];
                for i in 0..fan_in {
                    acc += act[i] * w[i * fan_out + j];
                }
                *nj = acc;
            }
            if li + 1 < dims.len() {
                for v in &mut next {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            act = next;
        }
        let m = act.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + act.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        lse - act[label]
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let dims = [(6, 5), (5, 3)];
        let seed_base = 90;
        // f32 parameters, shared by both the graph and the f64 oracle
        let mut tensors = Vec::new();
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = (1.0 / fan_in as f32).sqrt();
            tensors.push(Tensor::rand_uniform(
                vec![fan_in, fan_out],
                -bound,
                bound,
                seed_base + 2 * li as u64,
            ));
            tensors.push(Tensor::rand_uniform(
                vec![fan_out],
                -0.1,
                0.1,
                seed_base + 2 * li as u64 + 1,
            ));
        }
        let x = Tensor::rand_uniform(vec![1, 6], 0.0, 1.0, 77);
        let label = 1usize;

        let forward_graph = |tensors: &[Tensor]| -> (f32, Vec<Vec<f32>>) {
            let mut g = Graph::new();
            let ids: Vec<NodeId> =
                tensors.iter().map(|t| g.leaf(t.clone().requires_grad(true))).collect();
            let xid = g.leaf(x.clone());
            let h = g.matmul(xid, ids[0]).unwrap();
            let h = g.bias_add(h, ids[1]).unwrap();
            let h = g.relu(h);
            let z = g.matmul(h, ids[2]).unwrap();
            let z = g.bias_add(z, ids[3]).unwrap();
            let loss = g.cross_entropy_logits(z, &[label]).unwrap();
            g.backward(loss).unwrap();
            let grads = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
            (g.value(loss).data[0], grads)
        };
        let (_, grads) = forward_graph(&tensors);

        let p64: Vec<Vec<f64>> =
            tensors.iter().map(|t| t.data.iter().map(|&v| v as f64).collect()).collect();
        let x64: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
        let h = 1e-3;
        for (pi, grad) in grads.iter().enumerate() {
            for ci in 0..grad.len() {
                let mut plus = p64.clone();
                plus[pi][ci] += h;
                let mut minus = p64.clone();
                minus[pi][ci] -= h;
                let fd = (dense_net_f64(&plus, &dims, &x64, label)
                    - dense_net_f64(&minus, &dims, &x64, label))
                    / (2.0 * h);
                let ad = grad[ci] as f64;
                let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
                assert!(
                    rel < 1e-4 || (ad - fd).abs() < 1e-6,
                    "param {pi} coord {ci}: ad={ad} fd={fd} rel={rel}"
                );
            }
        }
    }

    #[test]
    fn ops_are_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::rand_uniform(vec![2, 1, 6, 6], 0.0, 1.0, 5).requires_grad(true));
            let k = g.leaf(Tensor::rand_uniform(vec![3, 1, 3, 3], -0.5, 0.5, 6).requires_grad(true));
            let c = g.conv2d(x, k, 1).unwrap();
            let r = g.relu(c);
            let p = g.maxpool2x2(r).unwrap();
            let f = g.reshape(p, vec![2, 27]).unwrap();
            let w = g.leaf(Tensor::rand_uniform(vec![27, 4], -0.3, 0.3, 7).requires_grad(true));
            let z = g.matmul(f, w).unwrap();
            let loss = g.cross_entropy_logits(z, &[0, 2]).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).data[0],
                g.grad(x).unwrap().to_vec(),
                g.grad(k).unwrap().to_vec(),
                g.grad(w).unwrap().to_vec(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.3.iter().zip(&b.3).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
