//! Dense/ReLU classifiers recorded onto a [`Graph`] with every layer
//! representation captured for margin queries.
//!
//! Captured layers are numbered `0..=L`: `0` is the raw input, then the output
//! of every ReLU in order, and `L` is the logits. Weights are stored
//! `[in_dim, out_dim]` so a batch propagates as `h · W + b`.

use std::io::Write;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            bias: true,
        }
    }
}

/// `input → hidden[0] → relu → … → n_classes` layer chain.
pub fn mlp_layers(input_dim: usize, hidden: &[usize], n_classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(LayerSpec::dense(prev, h));
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::dense(prev, n_classes));
    layers
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    n_classes: usize,
    seed: u64,
}

fn validate_layers(layers: &[LayerSpec], n_classes: usize) -> Result<usize> {
    if n_classes < 2 {
        return Err(Error::config(format!("n_classes must be at least 2, got {n_classes}")));
    }
    let mut width: Option<usize> = None;
    let mut input_dim = None;
    for (i, layer) in layers.iter().enumerate() {
        if let LayerSpec::Dense { in_dim, out_dim, .. } = *layer {
            if in_dim == 0 || out_dim == 0 {
                return Err(Error::config(format!("layer {i}: dense dimensions must be positive")));
            }
            if let Some(w) = width {
                if w != in_dim {
                    return Err(Error::config(format!(
                        "layer {i}: dense input {in_dim} does not chain with previous width {w}"
                    )));
                }
            }
            input_dim.get_or_insert(in_dim);
            width = Some(out_dim);
        } else if width.is_none() {
            return Err(Error::config("the first layer must be dense"));
        }
    }
    match layers.last() {
        Some(LayerSpec::Dense { out_dim, .. }) if *out_dim == n_classes => {}
        Some(LayerSpec::Dense { out_dim, .. }) => {
            return Err(Error::config(format!(
                "final dense layer has {out_dim} outputs but n_classes = {n_classes}"
            )))
        }
        _ => return Err(Error::config("the final layer must be dense")),
    }
    Ok(input_dim.expect("at least one dense layer"))
}

fn param_shapes(layers: &[LayerSpec]) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for layer in layers {
        if let LayerSpec::Dense { in_dim, out_dim, bias } = *layer {
            shapes.push(vec![in_dim, out_dim]);
            if bias {
                shapes.push(vec![out_dim]);
            }
        }
    }
    shapes
}

impl Model {
    /// He-uniform weights (bound `√(6/in_dim)`) and zero biases, fully
    /// determined by `seed`.
    pub fn init(layers: Vec<LayerSpec>, n_classes: usize, seed: u64) -> Result<Self> {
        validate_layers(&layers, n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            if let LayerSpec::Dense { in_dim, out_dim, bias } = *layer {
                let bound = (6.0 / in_dim as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let w = (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect();
                params.push(Tensor::new(vec![in_dim, out_dim], w)?);
                if bias {
                    params.push(Tensor::zeros(&[out_dim]));
                }
            }
        }
        Ok(Model {
            layers,
            params,
            n_classes,
            seed,
        })
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        Self::init(mlp_layers(input_dim, hidden, n_classes), n_classes, seed)
    }

    /// Model with explicit parameter values, in layer order (weight, then bias).
    pub fn from_parts(layers: Vec<LayerSpec>, params: Vec<Tensor>, n_classes: usize, seed: u64) -> Result<Self> {
        validate_layers(&layers, n_classes)?;
        let shapes = param_shapes(&layers);
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            if s.as_slice() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "from_parts",
                    lhs: s.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(Model {
            layers,
            params,
            n_classes,
            seed,
        })
    }

    /// Linear classifier `f = x · W + b` with `W: [d, n]`.
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [d, n] = weight.shape() else {
            return Err(Error::InvalidShape {
                shape: weight.shape().to_vec(),
                reason: "linear weight must be [in_dim, n_classes]".into(),
            });
        };
        let layers = vec![LayerSpec::dense(*d, *n)];
        let n = *n;
        Self::from_parts(layers, vec![weight, bias], n, 0)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        match self.layers[0] {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Relu => unreachable!("validated"),
        }
    }

    /// Number of captured representations, input and logits included.
    pub fn n_captured(&self) -> usize {
        2 + self.layers.iter().filter(|l| matches!(l, LayerSpec::Relu)).count()
    }

    pub fn logits_layer(&self) -> usize {
        self.n_captured() - 1
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Dense { bias, .. } = layer {
                names.push(format!("layer{i}.weight"));
                if *bias {
                    names.push(format!("layer{i}.bias"));
                }
            }
        }
        names
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![0, self.input_dim()],
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records the network on a fresh graph for the batch `x: [B, d]`.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut graph = Graph::new();
        let mut h = graph.input(x.clone());
        let mut layer_nodes = vec![h];
        let mut param_nodes = Vec::with_capacity(self.params.len());
        let mut params = self.params.iter();
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { bias, .. } => {
                    let w = graph.param(params.next().expect("validated").clone());
                    param_nodes.push(w);
                    h = graph.matmul(h, w)?;
                    if *bias {
                        let b = graph.param(params.next().expect("validated").clone());
                        param_nodes.push(b);
                        h = graph.add(h, b)?;
                    }
                }
                LayerSpec::Relu => {
                    h = graph.relu(h)?;
                    layer_nodes.push(h);
                }
            }
        }
        layer_nodes.push(h);
        Ok(ForwardTrace {
            graph,
            layer_nodes,
            param_nodes,
            logits: h,
            n_classes: self.n_classes,
        })
    }

    /// Logits without recording a graph.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut params = self.params.iter();
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { bias, .. } => {
                    h = h.matmul(params.next().expect("validated"))?;
                    if *bias {
                        h = h.add(params.next().expect("validated"))?;
                    }
                }
                LayerSpec::Relu => h = h.relu(),
            }
        }
        Ok(h)
    }

    /// Argmax predictions evaluated in chunks of `chunk` rows.
    pub fn predict_batch(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = x.rows();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.logits(&x.select_rows(&idx)?)?;
            out.extend(logits.argmax_rows()?);
            start = end;
        }
        Ok(out)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict_batch(x, 512)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            layers: self.layers.clone(),
            n_classes: self.n_classes,
            seed: self.seed,
            param_count: self.params.iter().map(Tensor::len).sum(),
        }
    }

    /// Checkpoint bytes: one line of JSON header, then every parameter as
    /// little-endian `f64`, layer order, row-major.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format_err = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| format_err(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 {
            return Err(format_err(format!("unsupported format {} v{}", header.format, header.version)));
        }
        validate_layers(&header.layers, header.n_classes)?;
        let payload = &bytes[nl + 1..];
        let shapes = param_shapes(&header.layers);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != header.param_count {
            return Err(format_err(format!(
                "header declares {} parameters, layers need {total}",
                header.param_count
            )));
        }
        if payload.len() != total * 8 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: nl + 1 + payload.len(),
                needed: (total * 8).saturating_sub(payload.len()),
            });
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let params = shapes
            .into_iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, values.by_ref().take(n).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(header.layers, params, header.n_classes, header.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}

const CHECKPOINT_FORMAT: &str = "marginforge-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    layers: Vec<LayerSpec>,
    n_classes: usize,
    seed: u64,
    param_count: usize,
}

/// A recorded forward pass: the graph plus handles to every captured layer
/// and parameter node.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub graph: Graph,
    /// `h_0 = x`, each post-ReLU activation, then the logits.
    pub layer_nodes: Vec<NodeId>,
    /// Parameter nodes aligned with [`Model::params`].
    pub param_nodes: Vec<NodeId>,
    pub logits: NodeId,
    n_classes: usize,
}

impl ForwardTrace {
    pub fn logits_value(&self) -> &Tensor {
        self.graph.value(self.logits)
    }

    pub fn batch_size(&self) -> usize {
        self.logits_value().rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input(&self) -> NodeId {
        self.layer_nodes[0]
    }

    pub fn layer_node(&self, layer: usize) -> Result<NodeId> {
        self.layer_nodes.get(layer).copied().ok_or(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: self.layer_nodes.len(),
        })
    }

    /// Row-wise argmax of the logits, lowest class index on ties.
    pub fn predict(&self) -> Vec<usize> {
        self.logits_value().argmax_rows().expect("logits are a matrix")
    }

    /// `∇_{h_ℓ} f_class` for a single sample, shaped like that sample's activation.
    pub fn logit_grad_wrt_layer(&self, class: usize, layer: usize, sample: usize) -> Result<Tensor> {
        check_index("class", class, self.n_classes)?;
        check_index("sample", sample, self.batch_size())?;
        let node = self.layer_node(layer)?;
        let mut seed = Tensor::zeros(self.logits_value().shape());
        seed.data_mut()[sample * self.n_classes + class] = 1.0;
        let grads = self.graph.backward_from(self.logits, seed, Some(&[node]))?;
        let width = self.graph.value(node).cols();
        Ok(match grads.get(node) {
            Some(g) => Tensor::vector(g.row(sample).to_vec()),
            None => Tensor::zeros(&[width]),
        })
    }

    /// Gradients of `Σ_b Σ_c seed[b, c] · f_c(x_b)` at the requested layers.
    /// Samples do not interact, so row `b` of each result is the gradient of
    /// sample `b`'s seeded combination alone.
    pub fn seeded_layer_grads(&self, seed: Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        let nodes = layers.iter().map(|&l| self.layer_node(l)).collect::<Result<Vec<_>>>()?;
        let mut grads = self.graph.backward_from(self.logits, seed, Some(&nodes))?;
        Ok(nodes
            .iter()
            .map(|&n| grads.take(n).unwrap_or_else(|| Tensor::zeros(self.graph.value(n).shape())))
            .collect())
    }
}

fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index >= limit {
        return Err(Error::IndexOutOfRange { what, index, limit });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Model {
        Model::init(vec![LayerSpec::dense(2, 4), LayerSpec::Relu, LayerSpec::dense(4, 2)], 2, 7).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_bias() {
        let a = toy();
        assert_eq!(a, toy());
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
        assert!(a.params()[3].data().iter().all(|&v| v == 0.0));
        let other = Model::init(a.layers().to_vec(), 2, 8).unwrap();
        assert_ne!(a.params()[0], other.params()[0]);
    }

    #[test]
    fn he_bound_holds() {
        let m = Model::init(vec![LayerSpec::dense(100, 5)], 5, 3).unwrap();
        let bound = 0.06f64.sqrt();
        assert!(m.params()[0].data().iter().all(|v| v.abs() <= bound));
        // the draws should actually use the range
        let max = m.params()[0].data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > 0.9 * bound);
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        assert!(Model::init(vec![LayerSpec::dense(2, 4), LayerSpec::dense(5, 2)], 2, 0).is_err());
        assert!(Model::init(vec![LayerSpec::dense(2, 3)], 2, 0).is_err());
        assert!(Model::init(vec![LayerSpec::dense(2, 1)], 1, 0).is_err());
        assert!(Model::init(vec![LayerSpec::dense(2, 2), LayerSpec::Relu], 2, 0).is_err());
    }

    #[test]
    fn identity_network_passes_input_through() {
        let m = Model::linear(Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().logits_value(), &x);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let m = toy();
        let zeroed: Vec<Tensor> = m.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let z = Model::from_parts(m.layers().to_vec(), zeroed, 2, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        assert!(z.forward(&x).unwrap().logits_value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        assert!(toy().forward(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn predict_ties_go_to_lowest_class() {
        let m = Model::linear(Tensor::identity(2), Tensor::zeros(&[2])).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.5, 0.5, 2.0, -1.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().predict(), vec![1, 0, 0]);
    }

    #[test]
    fn logits_layer_gradient_is_one_hot() {
        let m = toy();
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.7, -0.2, 0.4]).unwrap();
        let t = m.forward(&x).unwrap();
        let g = t.logit_grad_wrt_layer(1, m.logits_layer(), 1).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_input_gradient_is_weight_column() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = Model::linear(w, Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let t = m.forward(&x).unwrap();
        for class in 0..3 {
            let g = t.logit_grad_wrt_layer(class, 0, 0).unwrap();
            assert_eq!(g.data(), &[m.params()[0].get2(0, class), m.params()[0].get2(1, class)]);
        }
    }

    #[test]
    fn gradient_query_indices_are_checked() {
        let m = toy();
        let t = m.forward(&Tensor::zeros(&[1, 2])).unwrap();
        assert!(t.logit_grad_wrt_layer(2, 0, 0).is_err());
        assert!(t.logit_grad_wrt_layer(0, 3, 0).is_err());
        assert!(t.logit_grad_wrt_layer(0, 0, 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = Model::mlp(3, &[5, 4], 3, 11).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let m = Model::mlp(3, &[5], 2, 1).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let err = Model::from_checkpoint_bytes(&bytes[..bytes.len() - 3], Path::new("ck")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }
}
