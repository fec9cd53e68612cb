//! Model zoo: a small conv net and an MLP, with named-layer parameter
//! management and the canonical flat-vector view used by aggregation.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::seed;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("unsupported architecture: {0}")]
    UnsupportedArch(String),
    #[error("flat vector length {got} does not match architecture parameter count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no layer named {0}")]
    NoSuchLayer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ConvSmall,
    Mlp,
}

/// Declarative model architecture; the parameter layout is a pure function
/// of this description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ArchKind,
    /// Input shape as (channels, height, width).
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// Hidden widths for the MLP; ignored by the conv net.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![128]
}

/// One named tensor in the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for init scaling; 0 marks a bias (zero-initialised).
    pub fan_in: usize,
}

impl Architecture {
    pub fn conv_small(input: (usize, usize, usize), classes: usize) -> Self {
        Architecture { kind: ArchKind::ConvSmall, input, classes, hidden: vec![] }
    }

    pub fn mlp(input: (usize, usize, usize), hidden: Vec<usize>, classes: usize) -> Self {
        Architecture { kind: ArchKind::Mlp, input, classes, hidden }
    }

    /// Ordered tensor layout. Flat vectors concatenate these in order.
    pub fn tensor_specs(&self) -> Result<Vec<TensorSpec>, NnError> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.classes == 0 {
            return Err(NnError::UnsupportedArch(format!("degenerate spec {self:?}")));
        }
        let mut specs = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, fan_in: usize| {
            specs.push(TensorSpec { name: name.to_string(), shape, fan_in });
        };
        match self.kind {
            ArchKind::ConvSmall => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(NnError::UnsupportedArch(format!(
                        "conv_small needs h, w divisible by 4, got {h}x{w}"
                    )));
                }
                // conv(16,5x5) relu pool conv(32,5x5) relu pool fc(128) relu fc(classes)
                push("conv1.w", vec![16, c, 5, 5], c * 25);
                push("conv1.b", vec![16], 0);
                push("conv2.w", vec![32, 16, 5, 5], 16 * 25);
                push("conv2.b", vec![32], 0);
                let flat = 32 * (h / 4) * (w / 4);
                push("fc1.w", vec![flat, 128], flat);
                push("fc1.b", vec![128], 0);
                push("fc2.w", vec![128, self.classes], 128);
                push("fc2.b", vec![self.classes], 0);
            }
            ArchKind::Mlp => {
                let mut fan_in = c * h * w;
                for (i, &width) in self.hidden.iter().enumerate() {
                    push(&format!("fc{}.w", i + 1), vec![fan_in, width], fan_in);
                    push(&format!("fc{}.b", i + 1), vec![width], 0);
                    fan_in = width;
                }
                let last = self.hidden.len() + 1;
                push(&format!("fc{last}.w"), vec![fan_in, self.classes], fan_in);
                push(&format!("fc{last}.b"), vec![self.classes], 0);
            }
        }
        Ok(specs)
    }

    pub fn param_count(&self) -> Result<usize, NnError> {
        Ok(self.tensor_specs()?.iter().map(|s| s.shape.iter().product::<usize>()).sum())
    }

    /// Build the forward pass on `g` from parameter leaves in layout order;
    /// returns the raw logits node.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        match self.kind {
            ArchKind::ConvSmall => {
                let n = g.value(x).shape[0];
                let h = g.conv2d(x, params[0], 2)?;
                let h = g.bias_add(h, params[1])?;
                let h = g.relu(h);
                let h = g.maxpool2x2(h)?;
                let h = g.conv2d(h, params[2], 2)?;
                let h = g.bias_add(h, params[3])?;
                let h = g.relu(h);
                let h = g.maxpool2x2(h)?;
                let flat: usize = g.value(h).data.len() / n;
                let h = g.reshape(h, vec![n, flat])?;
                let h = g.matmul(h, params[4])?;
                let h = g.bias_add(h, params[5])?;
                let h = g.relu(h);
                let z = g.matmul(h, params[6])?;
                g.bias_add(z, params[7])
            }
            ArchKind::Mlp => {
                let n = g.value(x).shape[0];
                let dim: usize = g.value(x).data.len() / n;
                let mut h = g.reshape(x, vec![n, dim])?;
                let layers = self.hidden.len() + 1;
                for li in 0..layers {
                    h = g.matmul(h, params[2 * li])?;
                    h = g.bias_add(h, params[2 * li + 1])?;
                    if li + 1 < layers {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Ordered set of named layer parameter tensors with a canonical
/// flat-vector view.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    tensors: Vec<(String, Tensor)>,
    param_count: usize,
}

impl ModelParams {
    /// Deterministic initialization: weights are fan-in-scaled uniform,
    /// biases zero. Identical (arch, seed) gives bit-identical parameters.
    pub fn build(arch: &Architecture, seed_value: u64) -> Result<Self, NnError> {
        let specs = arch.tensor_specs()?;
        let mut tensors = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let t = if spec.fan_in == 0 {
                Tensor::zeros(spec.shape.clone())
            } else {
                let bound = (1.0 / spec.fan_in as f32).sqrt();
                Tensor::rand_uniform(
                    spec.shape.clone(),
                    -bound,
                    bound,
                    seed::derive(seed_value, &[0x6e6e, i as u64]),
                )
            };
            tensors.push((spec.name.clone(), t));
        }
        let param_count = tensors.iter().map(|(_, t)| t.numel()).sum();
        Ok(ModelParams { arch: arch.clone(), tensors, param_count })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    /// Concatenate all tensors, in declared layer order, into one flat vector.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuild parameters from a flat vector laid out by [`flatten`].
    ///
    /// [`flatten`]: ModelParams::flatten
    pub fn unflatten(arch: &Architecture, flat: &[f32]) -> Result<Self, NnError> {
        let specs = arch.tensor_specs()?;
        let expected: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        if flat.len() != expected {
            return Err(NnError::LengthMismatch { expected, got: flat.len() });
        }
        let mut tensors = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let t = Tensor {
                shape: spec.shape.clone(),
                data: flat[offset..offset + n].to_vec(),
                requires_grad: false,
                grad: None,
            };
            tensors.push((spec.name.clone(), t));
            offset += n;
        }
        Ok(ModelParams { arch: arch.clone(), tensors, param_count: expected })
    }

    /// Overwrite parameter values from a flat vector without reallocating.
    pub fn set_flat(&mut self, flat: &[f32]) -> Result<(), NnError> {
        if flat.len() != self.param_count {
            return Err(NnError::LengthMismatch { expected: self.param_count, got: flat.len() });
        }
        let mut offset = 0;
        for (_, t) in &mut self.tensors {
            let n = t.numel();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Distinct layer groups ("conv1", "fc2", ...) in declared order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (name, _) in &self.tensors {
            let group = name.split('.').next().unwrap_or(name).to_string();
            if names.last() != Some(&group) {
                names.push(group);
            }
        }
        names
    }

    /// Flat-vector range covered by a layer group (weights and biases).
    pub fn layer_slice(&self, layer: &str) -> Result<Range<usize>, NnError> {
        let mut offset = 0;
        let mut start = None;
        let mut end = 0;
        for (name, t) in &self.tensors {
            let group = name.split('.').next().unwrap_or(name);
            if group == layer {
                if start.is_none() {
                    start = Some(offset);
                }
                end = offset + t.numel();
            }
            offset += t.numel();
        }
        match start {
            Some(s) => Ok(s..end),
            None => Err(NnError::NoSuchLayer(layer.to_string())),
        }
    }

    /// Layer group with the fewest weights (biases included); ties break to
    /// the earliest layer in declared order.
    pub fn smallest_layer(&self) -> String {
        let mut best: Option<(usize, String)> = None;
        for name in self.layer_names() {
            let count = self.layer_slice(&name).expect("layer from layer_names").len();
            if best.as_ref().map(|(c, _)| count < *c).unwrap_or(true) {
                best = Some((count, name));
            }
        }
        best.expect("architecture has at least one layer").1
    }

    /// Insert every tensor as a graph leaf, in layout order.
    pub fn insert_leaves(&self, g: &mut Graph, requires_grad: bool) -> Vec<NodeId> {
        self.insert_leaves_with(g, |_| requires_grad)
    }

    /// Insert leaves with a per-tensor requires-grad predicate (tensor names
    /// are "conv1.w", "fc2.b", ...).
    pub fn insert_leaves_with(
        &self,
        g: &mut Graph,
        requires_grad: impl Fn(&str) -> bool,
    ) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|(name, t)| g.leaf(t.clone().requires_grad(requires_grad(name))))
            .collect()
    }

    /// Gather leaf gradients into flat-vector order; tensors that did not
    /// receive a gradient contribute zeros.
    pub fn collect_flat_grads(&self, g: &Graph, ids: &[NodeId]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count);
        for (&id, (_, t)) in ids.iter().zip(&self.tensors) {
            match g.grad(id) {
                Some(grad) => out.extend_from_slice(grad),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    /// Forward pass on a batch, returning raw logits [batch, classes].
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let mut g = Graph::new();
        let params = self.insert_leaves(&mut g, false);
        let x = g.leaf(batch.clone());
        let z = self.arch.forward(&mut g, &params, x)?;
        Ok(g.value(z).clone())
    }

    /// Temperature-scaled softmax probabilities for a batch.
    pub fn predict_probs(&self, batch: &Tensor, temperature: f64) -> Result<Tensor, NnError> {
        let mut g = Graph::new();
        let params = self.insert_leaves(&mut g, false);
        let x = g.leaf(batch.clone());
        let z = self.arch.forward(&mut g, &params, x)?;
        let p = g.softmax_t(z, temperature)?;
        Ok(g.value(p).clone())
    }

    /// Argmax class per row of a logits tensor.
    pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
        let classes = *logits.shape.last().unwrap_or(&1);
        logits
            .data
            .chunks(classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mnist_conv() -> Architecture {
        Architecture::conv_small((1, 28, 28), 10)
    }

    #[test]
    fn mlp_param_count_arithmetic() {
        // 784*128 + 128 + 128*10 + 10 = 101,770
        let arch = Architecture::mlp((1, 28, 28), vec![128], 10);
        assert_eq!(arch.param_count().unwrap(), 101_770);
    }

    #[test]
    fn conv_small_param_count_matches_layer_sum() {
        let arch = mnist_conv();
        let conv1 = 16 * 25 + 16;
        let conv2 = 32 * 16 * 25 + 32;
        let fc1 = 1568 * 128 + 128;
        let fc2 = 128 * 10 + 10;
        assert_eq!(arch.param_count().unwrap(), conv1 + conv2 + fc1 + fc2);
    }

    #[test]
    fn build_is_deterministic() {
        let arch = mnist_conv();
        let a = ModelParams::build(&arch, 99).unwrap();
        let b = ModelParams::build(&arch, 99).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = ModelParams::build(&arch, 100).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_bit_exact() {
        let arch = mnist_conv();
        let p = ModelParams::build(&arch, 5).unwrap();
        let flat = p.flatten();
        let q = ModelParams::unflatten(&arch, &flat).unwrap();
        for ((an, at), (bn, bt)) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(an, bn);
            assert_eq!(at.shape, bt.shape);
            assert!(at.data.iter().zip(&bt.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let arch = mnist_conv();
        let err = ModelParams::unflatten(&arch, &[0.0; 7]).unwrap_err();
        assert!(matches!(err, NnError::LengthMismatch { .. }));
    }

    #[test]
    fn layer_slices_partition_flat_vector() {
        let arch = mnist_conv();
        let p = ModelParams::build(&arch, 1).unwrap();
        let mut covered = 0;
        for name in p.layer_names() {
            let r = p.layer_slice(&name).unwrap();
            assert_eq!(r.start, covered, "layer {name} not contiguous");
            covered = r.end;
        }
        assert_eq!(covered, p.param_count());
        // fc2 slice length matches its own arithmetic
        assert_eq!(p.layer_slice("fc2").unwrap().len(), 128 * 10 + 10);
        assert!(p.layer_slice("fc9").is_err());
    }

    #[test]
    fn smallest_layer_is_conv1_for_default_net() {
        let p = ModelParams::build(&mnist_conv(), 1).unwrap();
        // conv1 = 416 weights incl. bias, the smallest group
        assert_eq!(p.smallest_layer(), "conv1");
        assert_eq!(p.layer_slice("conv1").unwrap().len(), 416);
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let arch = mnist_conv();
        let mut p = ModelParams::build(&arch, 1).unwrap();
        p.set_flat(&vec![0.0; p.param_count()]).unwrap();
        let x = Tensor::rand_uniform(vec![2, 1, 28, 28], 0.0, 1.0, 3);
        let probs = p.predict_probs(&x, 1.0).unwrap();
        for &v in &probs.data {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_are_batch_independent() {
        let arch = mnist_conv();
        let p = ModelParams::build(&arch, 7).unwrap();
        let batch = Tensor::rand_uniform(vec![8, 1, 28, 28], 0.0, 1.0, 11);
        let single = Tensor::new(vec![1, 1, 28, 28], batch.data[3 * 784..4 * 784].to_vec()).unwrap();
        let z_batch = p.predict(&batch).unwrap();
        let z_single = p.predict(&single).unwrap();
        let row = &z_batch.data[3 * 10..4 * 10];
        assert!(
            row.iter().zip(&z_single.data).all(|(a, b)| a.to_bits() == b.to_bits()),
            "batch row {:?} vs single {:?}",
            row,
            z_single.data
        );
    }

    #[test]
    fn predict_is_deterministic() {
        let arch = Architecture::mlp((1, 4, 4), vec![8], 3);
        let p = ModelParams::build(&arch, 21).unwrap();
        let x = Tensor::rand_uniform(vec![5, 1, 4, 4], 0.0, 1.0, 2);
        let a = ModelParams::argmax_rows(&p.predict(&x).unwrap());
        let b = ModelParams::argmax_rows(&p.predict(&x).unwrap());
        assert_eq!(a, b);
    }
}
