//! Large-margin losses built on the linearized distance to a decision boundary.
//!
//! For a class pair `(i, j)` and a captured representation `h_ℓ`, the distance
//! from a sample to the boundary `f_i = f_j` is approximated by
//!
//! ```text
//! d̃ = |f_i − f_j| / (ε + ‖∇_{h_ℓ} f_i − ∇_{h_ℓ} f_j‖_q)
//! ```
//!
//! where `q` is the dual exponent of the norm `p` used to measure distance.
//! The training loss hinges each signed distance against a target margin `γ_ℓ`,
//! aggregates over the competing classes, sums over layers and averages over
//! the batch. Denominators enter the graph as frozen constants, so parameter
//! gradients only flow through the numerators.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::net::{ForwardTrace, Model};
use crate::tensor::Tensor;

/// Norm used to measure distances. Only `1`, `2` and `∞` are supported.
///
/// Serialized as `"1"`, `"2"` or `"inf"`; plain JSON numbers `1` and `2` are
/// accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "NormRepr")]
pub enum NormExponent {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NormRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<NormRepr> for NormExponent {
    type Error = Error;

    fn try_from(r: NormRepr) -> Result<Self> {
        match r {
            NormRepr::Number(p) => NormExponent::from_p(p),
            NormRepr::Text(s) => s.parse(),
        }
    }
}

impl NormExponent {
    pub const ALL: [NormExponent; 3] = [NormExponent::One, NormExponent::Two, NormExponent::Inf];

    pub fn from_p(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(NormExponent::One)
        } else if p == 2.0 {
            Ok(NormExponent::Two)
        } else if p == f64::INFINITY {
            Ok(NormExponent::Inf)
        } else {
            Err(Error::config(format!("unsupported norm exponent {p}; use 1, 2 or inf")))
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            NormExponent::One => 1.0,
            NormExponent::Two => 2.0,
            NormExponent::Inf => f64::INFINITY,
        }
    }

    /// `q = p / (p − 1)`, with `1 ↔ ∞`.
    pub fn dual(self) -> Self {
        match self {
            NormExponent::One => NormExponent::Inf,
            NormExponent::Two => NormExponent::Two,
            NormExponent::Inf => NormExponent::One,
        }
    }

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormExponent::One => v.iter().map(|x| x.abs()).sum(),
            NormExponent::Two => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormExponent::Inf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl fmt::Display for NormExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormExponent::One => "1",
            NormExponent::Two => "2",
            NormExponent::Inf => "inf",
        })
    }
}

impl FromStr for NormExponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(NormExponent::One),
            "2" | "l2" => Ok(NormExponent::Two),
            "inf" | "linf" | "∞" => Ok(NormExponent::Inf),
            other => Err(Error::config(format!("unsupported norm `{other}`; use 1, 2 or inf"))),
        }
    }
}

/// Dual exponent of `p ∈ {1, 2, ∞}`.
pub fn dual_exponent(p: f64) -> Result<f64> {
    Ok(NormExponent::from_p(p)?.dual().as_f64())
}

/// Minimum `‖δ‖_p` subject to `aᵀδ = b`, i.e. `|b| / ‖a‖_q`.
pub fn hyperplane_distance(a: &[f64], b: f64, p: NormExponent) -> Result<f64> {
    if b == 0.0 {
        return Ok(0.0);
    }
    let dual = p.dual().norm(a);
    if dual == 0.0 {
        return Err(Error::Infeasible { b });
    }
    Ok(b.abs() / dual)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Max,
    Sum,
}

pub fn aggregate(penalties: &[f64], aggregator: Aggregator) -> Result<f64> {
    if penalties.is_empty() {
        return Err(Error::Empty("penalty list"));
    }
    Ok(match aggregator {
        Aggregator::Max => penalties.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Sum => penalties.iter().sum(),
    })
}

/// `max{0, γ + num / (ε + den)}` with the signed numerator `f_i − f_y`.
pub fn margin_pair_penalty(num: f64, den: f64, gamma: f64, eps: f64) -> f64 {
    (gamma + num / (eps + den)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPreset {
    /// Input, every hidden activation and the logits.
    All,
    Input,
    Output,
}

/// Which captured representations carry a margin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSet {
    Preset(LayerPreset),
    Explicit(Vec<usize>),
}

impl LayerSet {
    pub const ALL: LayerSet = LayerSet::Preset(LayerPreset::All);
    pub const INPUT: LayerSet = LayerSet::Preset(LayerPreset::Input);

    pub fn resolve(&self, n_captured: usize) -> Result<Vec<usize>> {
        let layers = match self {
            LayerSet::Preset(LayerPreset::All) => (0..n_captured).collect(),
            LayerSet::Preset(LayerPreset::Input) => vec![0],
            LayerSet::Preset(LayerPreset::Output) => vec![n_captured - 1],
            LayerSet::Explicit(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        if layers.is_empty() {
            return Err(Error::config("margin layer set is empty"));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= n_captured) {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: bad,
                limit: n_captured,
            });
        }
        Ok(layers)
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(LayerSet::ALL),
            "input" => Ok(LayerSet::INPUT),
            "output" => Ok(LayerSet::Preset(LayerPreset::Output)),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|e| Error::config(format!("layer `{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()
                .map(LayerSet::Explicit),
        }
    }
}

/// Upper bound on each per-sample, per-layer margin term.
///
/// In JSON: absent or `"auto"` is [`Clip::Auto`], `null` is [`Clip::Off`] and
/// a number is [`Clip::At`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Clip {
    /// `10·γ_ℓ` for each layer.
    #[default]
    Auto,
    Off,
    At(f64),
}

impl Clip {
    pub fn threshold(self, gamma: f64) -> Option<f64> {
        match self {
            Clip::Auto => Some(10.0 * gamma),
            Clip::Off => None,
            Clip::At(c) => Some(c),
        }
    }
}

impl Serialize for Clip {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Clip::Auto => s.serialize_str("auto"),
            Clip::Off => s.serialize_none(),
            Clip::At(c) => s.serialize_f64(*c),
        }
    }
}

impl<'de> Deserialize<'de> for Clip {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Option::<Repr>::deserialize(d)? {
            None => Ok(Clip::Off),
            Some(Repr::Num(c)) => Ok(Clip::At(c)),
            Some(Repr::Word(w)) if w == "auto" => Ok(Clip::Auto),
            Some(Repr::Word(w)) => Err(serde::de::Error::custom(format!("clip must be a number, null or \"auto\", got {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub p: NormExponent,
    #[serde(default = "default_layers")]
    pub layers: LayerSet,
    /// Margin shared by every layer unless `gamma_per_layer` is given.
    pub gamma: f64,
    /// One margin per resolved layer, overriding `gamma`.
    #[serde(default)]
    pub gamma_per_layer: Option<Vec<f64>>,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub clip: Clip,
    /// Competing classes per sample, highest logits first. `None` uses all.
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "default_xent_weight")]
    pub xent_weight: f64,
}

fn default_layers() -> LayerSet {
    LayerSet::ALL
}
fn default_aggregator() -> Aggregator {
    Aggregator::Max
}
fn default_epsilon() -> f64 {
    1e-6
}
fn default_xent_weight() -> f64 {
    1.0
}

impl MarginConfig {
    pub fn new(p: NormExponent, layers: LayerSet, gamma: f64) -> Self {
        MarginConfig {
            p,
            layers,
            gamma,
            gamma_per_layer: None,
            aggregator: Aggregator::Max,
            epsilon: default_epsilon(),
            clip: Clip::Auto,
            top_k: None,
            xent_weight: default_xent_weight(),
        }
    }

    /// Checks the config against a model shape and resolves layers, margins
    /// and class count.
    pub fn resolve(&self, n_captured: usize, n_classes: usize) -> Result<ResolvedMargin> {
        let layers = self.layers.resolve(n_captured)?;
        let gammas = match &self.gamma_per_layer {
            Some(g) if g.len() != layers.len() => {
                return Err(Error::config(format!(
                    "gamma_per_layer has {} entries for {} margin layers",
                    g.len(),
                    layers.len()
                )))
            }
            Some(g) => g.clone(),
            None => vec![self.gamma; layers.len()],
        };
        if gammas.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::config("margins must be positive and finite"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be positive"));
        }
        if let Clip::At(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::config("clip threshold must be positive"));
            }
        }
        if !(self.xent_weight >= 0.0) {
            return Err(Error::config("xent_weight must be non-negative"));
        }
        let top_k = self.top_k.unwrap_or(n_classes - 1);
        if top_k < 1 || top_k > n_classes - 1 {
            return Err(Error::config(format!(
                "top_k must lie in 1..={}, got {top_k}",
                n_classes - 1
            )));
        }
        Ok(ResolvedMargin { layers, gammas, top_k })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMargin {
    pub layers: Vec<usize>,
    pub gammas: Vec<f64>,
    pub top_k: usize,
}

/// Linearized distance of one sample to the `(class_i, class_y)` boundary at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub sample: usize,
    pub class_i: usize,
    pub class_y: usize,
    pub layer: usize,
    /// `f_i − f_y`.
    pub numerator: f64,
    /// `‖∇_{h_ℓ} f_i − ∇_{h_ℓ} f_y‖_q`.
    pub denominator: f64,
    /// `|numerator| / (ε + denominator)`.
    pub distance: f64,
}

impl PairDistance {
    fn new(sample: usize, class_i: usize, class_y: usize, layer: usize, numerator: f64, denominator: f64, eps: f64) -> Self {
        PairDistance {
            sample,
            class_i,
            class_y,
            layer,
            numerator,
            denominator,
            distance: numerator.abs() / (eps + denominator),
        }
    }
}

pub const PAIR_DISTANCE_CSV_HEADER: &str = "step,sample,layer,class_i,class_y,numerator,denominator,distance";

pub fn write_pair_distances_csv<W: Write>(out: &mut W, step: u64, rows: &[PairDistance], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "{PAIR_DISTANCE_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(
            out,
            "{step},{},{},{},{},{},{},{}",
            r.sample, r.layer, r.class_i, r.class_y, r.numerator, r.denominator, r.distance
        )?;
    }
    Ok(())
}

/// `d̃` between `class_i` and `class_j` for one sample at captured layer `layer`.
pub fn approx_distance(
    trace: &ForwardTrace,
    sample: usize,
    class_i: usize,
    class_j: usize,
    layer: usize,
    p: NormExponent,
    eps: f64,
) -> Result<PairDistance> {
    let n = trace.n_classes();
    for (what, idx, limit) in [("class", class_i, n), ("class", class_j, n), ("sample", sample, trace.batch_size())] {
        if idx >= limit {
            return Err(Error::IndexOutOfRange { what, index: idx, limit });
        }
    }
    if class_i == class_j {
        return Err(Error::config("distance needs two distinct classes"));
    }
    let logits = trace.logits_value();
    let mut seed = Tensor::zeros(logits.shape());
    seed.data_mut()[sample * n + class_i] = 1.0;
    seed.data_mut()[sample * n + class_j] = -1.0;
    let grads = trace.seeded_layer_grads(seed, &[layer])?;
    let den = p.dual().norm(grads[0].row(sample));
    let num = logits.get2(sample, class_i) - logits.get2(sample, class_j);
    Ok(PairDistance::new(sample, class_i, class_j, layer, num, den, eps))
}

/// Competing classes per row, highest logit first, lower index on ties.
pub fn top_competitors(logits: &Tensor, labels: &[usize], k: usize) -> Vec<usize> {
    let n = logits.cols();
    let mut out = Vec::with_capacity(labels.len() * k);
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.row(b);
        let mut others: Vec<usize> = (0..n).filter(|&c| c != y).collect();
        others.sort_by(|&a, &c| row[c].total_cmp(&row[a]).then(a.cmp(&c)));
        out.extend_from_slice(&others[..k]);
    }
    out
}

fn check_labels(labels: &[usize], batch: usize, n_classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![batch],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: bad,
            limit: n_classes,
        });
    }
    Ok(())
}

/// Per-sample row norms (dual exponent) of the gradient of
/// `f_{competitor(b)} − f_{y_b}` at each requested layer: `result[layer][b]`.
fn pair_denominators(trace: &ForwardTrace, labels: &[usize], competitor: &[usize], layers: &[usize], q: NormExponent) -> Result<Vec<Vec<f64>>> {
    let n = trace.n_classes();
    let mut seed = Tensor::zeros(trace.logits_value().shape());
    for (b, (&c, &y)) in competitor.iter().zip(labels).enumerate() {
        seed.data_mut()[b * n + c] += 1.0;
        seed.data_mut()[b * n + y] -= 1.0;
    }
    let grads = trace.seeded_layer_grads(seed, layers)?;
    Ok(grads
        .iter()
        .map(|g| (0..labels.len()).map(|b| q.norm(g.row(b))).collect())
        .collect())
}

#[derive(Debug, Clone)]
pub struct MarginLoss {
    /// Scalar loss node, differentiable w.r.t. parameters through the numerators.
    pub loss: NodeId,
    pub diagnostics: Vec<PairDistance>,
}

/// Builds the multi-layer margin loss (plus the weighted cross-entropy term)
/// on the trace's graph.
pub fn margin_loss_batch(trace: &mut ForwardTrace, labels: &[usize], config: &MarginConfig) -> Result<MarginLoss> {
    let batch = trace.batch_size();
    let n = trace.n_classes();
    check_labels(labels, batch, n)?;
    let resolved = config.resolve(trace.layer_nodes.len(), n)?;
    let k = resolved.top_k;
    let q = config.p.dual();
    let eps = config.epsilon;

    let logits_val = trace.logits_value().clone();
    let competitors = top_competitors(&logits_val, labels, k);

    // dens[rank][layer][sample]
    let mut dens = Vec::with_capacity(k);
    for r in 0..k {
        let comp: Vec<usize> = (0..batch).map(|b| competitors[b * k + r]).collect();
        dens.push(pair_denominators(trace, labels, &comp, &resolved.layers, q)?);
    }

    let mut diagnostics = Vec::with_capacity(batch * k * resolved.layers.len());
    for (li, &layer) in resolved.layers.iter().enumerate() {
        for b in 0..batch {
            for r in 0..k {
                let c = competitors[b * k + r];
                let num = logits_val.get2(b, c) - logits_val.get2(b, labels[b]);
                diagnostics.push(PairDistance::new(b, c, labels[b], layer, num, dens[r][li][b], eps));
            }
        }
    }

    let g = &mut trace.graph;
    let logits = trace.logits;
    let true_idx: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, k)).collect();
    let f_comp = g.gather(logits, competitors.clone(), k)?;
    let f_true = g.gather(logits, true_idx, k)?;
    let num = g.sub(f_comp, f_true)?;

    let mut total: Option<NodeId> = None;
    for (li, &gamma) in resolved.gammas.iter().enumerate() {
        let mut inv = Vec::with_capacity(batch * k);
        for b in 0..batch {
            for dens_r in &dens {
                inv.push(1.0 / (eps + dens_r[li][b]));
            }
        }
        let inv = g.input(Tensor::new(vec![batch, k], inv)?);
        let inv = g.stop_gradient(inv)?;
        let ratio = g.mul(num, inv)?;
        let shifted = g.shift(ratio, gamma)?;
        let pen = g.relu(shifted)?;
        let mut term = match config.aggregator {
            Aggregator::Max => g.max_rows(pen)?,
            Aggregator::Sum => g.sum_rows(pen)?,
        };
        if let Some(c) = config.clip.threshold(gamma) {
            // min(term, c) = term − relu(term − c)
            let over = g.shift(term, -c)?;
            let over = g.relu(over)?;
            term = g.sub(term, over)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let summed = g.sum(total.expect("at least one layer"))?;
    let mut loss = g.scale(summed, 1.0 / batch as f64)?;
    if config.xent_weight > 0.0 {
        let xent = cross_entropy_loss(trace, labels)?;
        let g = &mut trace.graph;
        let weighted = g.scale(xent, config.xent_weight)?;
        loss = g.add(loss, weighted)?;
    }
    Ok(MarginLoss { loss, diagnostics })
}

/// Mean over the batch of `logsumexp(f) − f_y`.
pub fn cross_entropy_loss(trace: &mut ForwardTrace, labels: &[usize]) -> Result<NodeId> {
    let batch = trace.batch_size();
    check_labels(labels, batch, trace.n_classes())?;
    let logits = trace.logits;
    let g = &mut trace.graph;
    let lse = g.logsumexp_rows(logits)?;
    let lse = g.sum(lse)?;
    let picked = g.gather(logits, labels.to_vec(), 1)?;
    let picked = g.sum(picked)?;
    let diff = g.sub(lse, picked)?;
    g.scale(diff, 1.0 / batch as f64)
}

/// Mean over the batch of `Σ_{i≠y} max{0, m + f_i − f_y}`.
pub fn hinge_loss(trace: &mut ForwardTrace, labels: &[usize], margin: f64) -> Result<NodeId> {
    if !(margin > 0.0) {
        return Err(Error::config("hinge margin must be positive"));
    }
    let batch = trace.batch_size();
    let n = trace.n_classes();
    check_labels(labels, batch, n)?;
    let logits = trace.logits;
    let g = &mut trace.graph;
    let true_idx: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, n)).collect();
    let f_true = g.gather(logits, true_idx, n)?;
    let diff = g.sub(logits, f_true)?;
    let shifted = g.shift(diff, margin)?;
    let viol = g.relu(shifted)?;
    let mut mask = Tensor::full(&[batch, n], 1.0);
    for (b, &y) in labels.iter().enumerate() {
        mask.data_mut()[b * n + y] = 0.0;
    }
    let mask = g.input(mask);
    let masked = g.mul(viol, mask)?;
    let total = g.sum(masked)?;
    g.scale(total, 1.0 / batch as f64)
}

/// Per-sample `d̃` between the true class and the highest-scoring other class,
/// for each requested layer: `result[i][sample]` belongs to `layers[i]`.
pub fn layer_distances(model: &Model, x: &Tensor, labels: &[usize], layers: &[usize], p: NormExponent, eps: f64) -> Result<Vec<Vec<f64>>> {
    check_labels(labels, x.rows(), model.n_classes())?;
    for &l in layers {
        if l >= model.n_captured() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: l,
                limit: model.n_captured(),
            });
        }
    }
    let mut out = vec![Vec::with_capacity(labels.len()); layers.len()];
    let chunk = 256;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let trace = model.forward(&x.select_rows(&idx)?)?;
        let ys = &labels[start..end];
        let comp = top_competitors(trace.logits_value(), ys, 1);
        let dens = pair_denominators(&trace, ys, &comp, layers, p.dual())?;
        let logits = trace.logits_value();
        for (li, den) in dens.iter().enumerate() {
            for (b, &y) in ys.iter().enumerate() {
                let num = logits.get2(b, comp[b]) - logits.get2(b, y);
                out[li].push(num.abs() / (eps + den[b]));
            }
        }
        start = end;
    }
    Ok(out)
}

/// Mean linearized distance to the nearest competing boundary, per layer.
pub fn mean_layer_distances(model: &Model, dataset: &Dataset, layers: &[usize], p: NormExponent, eps: f64) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let per = layer_distances(model, &dataset.features, &dataset.labels, layers, p, eps)?;
    Ok(layers
        .iter()
        .zip(per)
        .map(|(&l, d)| (l, d.iter().sum::<f64>() / d.len() as f64))
        .collect())
}

/// For a binary linear classifier `g(x) = wᵀx + b`, returns the margin measured
/// through the network distance machinery (`p = 2`, `ε = 0`) and the textbook
/// value `min_k |wᵀx_k + b| / ‖w‖₂`.
pub fn svm_margin_check(w: &[f64], b: f64, points: &[Vec<f64>]) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let w_norm = NormExponent::Two.norm(w);
    if w_norm == 0.0 {
        return Err(Error::config("w must be non-zero"));
    }
    let d = w.len();
    let mut weight = Tensor::zeros(&[d, 2]);
    for (r, &wi) in w.iter().enumerate() {
        weight.data_mut()[r * 2] = wi;
    }
    let model = Model::linear(weight, Tensor::vector(vec![b, 0.0]))?;
    let x = Tensor::from_rows(points)?;
    let trace = model.forward(&x)?;
    let mut formula = f64::INFINITY;
    let mut analytic = f64::INFINITY;
    for (k, pt) in points.iter().enumerate() {
        let pd = approx_distance(&trace, k, 0, 1, 0, NormExponent::Two, 0.0)?;
        formula = formula.min(pd.distance);
        let g: f64 = w.iter().zip(pt).map(|(a, b)| a * b).sum::<f64>() + b;
        analytic = analytic.min(g.abs() / w_norm);
    }
    Ok((formula, analytic))
}

/// Ray grid for the brute-force distance oracle: `directions` evenly spaced
/// angles (a multiple of 8 so axes and diagonals are included), each sampled
/// at `radial_steps` points out to `radius` measured in the chosen norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarGrid {
    pub directions: usize,
    pub radial_steps: usize,
    pub radius: f64,
}

impl Default for PolarGrid {
    fn default() -> Self {
        PolarGrid {
            directions: 2048,
            radial_steps: 64,
            radius: 1.0,
        }
    }
}

/// Brute-force `min ‖δ‖_p` such that `f_i(x + δ) = f_j(x + δ)` for 2-D inputs.
///
/// Walks outward along every ray of the grid, stops at the first sign change of
/// `f_i − f_j`, bisects that segment `refine_iters` times and keeps the smallest
/// crossing. Every reported point lies on the boundary, so the result bounds the
/// true distance from above up to the angular resolution of the grid.
pub fn exact_distance_oracle_2d(
    model: &Model,
    x: &[f64],
    class_i: usize,
    class_j: usize,
    p: NormExponent,
    grid: &PolarGrid,
    refine_iters: usize,
) -> Result<f64> {
    if model.input_dim() != 2 || x.len() != 2 {
        return Err(Error::config("the exact distance oracle only handles 2-D inputs"));
    }
    if grid.directions == 0 || grid.radial_steps == 0 || !(grid.radius > 0.0) {
        return Err(Error::config("polar grid needs directions, steps and a positive radius"));
    }
    let n = model.n_classes();
    for c in [class_i, class_j] {
        if c >= n {
            return Err(Error::IndexOutOfRange {
                what: "class",
                index: c,
                limit: n,
            });
        }
    }
    let gap = |pts: &[[f64; 2]]| -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
        let logits = model.logits(&Tensor::from_rows(&rows)?)?;
        Ok((0..pts.len()).map(|r| logits.get2(r, class_i) - logits.get2(r, class_j)).collect())
    };
    let g0 = gap(&[[x[0], x[1]]])?[0];
    if g0 == 0.0 {
        return Ok(0.0);
    }
    let dirs: Vec<[f64; 2]> = (0..grid.directions)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / grid.directions as f64;
            let u = [theta.cos(), theta.sin()];
            let len = p.norm(&u);
            [u[0] / len, u[1] / len]
        })
        .collect();
    let at = |d: &[f64; 2], t: f64| [x[0] + t * d[0], x[1] + t * d[1]];
    let dt = grid.radius / grid.radial_steps as f64;

    // bracket[k] = (lo, hi) around the first crossing on ray k
    let mut bracket: Vec<Option<(f64, f64)>> = vec![None; dirs.len()];
    let mut prev_t = vec![0.0; dirs.len()];
    for s in 1..=grid.radial_steps {
        let t = dt * s as f64;
        let open: Vec<usize> = (0..dirs.len()).filter(|&k| bracket[k].is_none()).collect();
        if open.is_empty() {
            break;
        }
        let pts: Vec<[f64; 2]> = open.iter().map(|&k| at(&dirs[k], t)).collect();
        for (&k, v) in open.iter().zip(gap(&pts)?) {
            if v == 0.0 || v.signum() != g0.signum() {
                bracket[k] = Some((prev_t[k], t));
            } else {
                prev_t[k] = t;
            }
        }
    }
    let active: Vec<usize> = (0..dirs.len()).filter(|&k| bracket[k].is_some()).collect();
    if active.is_empty() {
        return Err(Error::NoBoundaryInWindow);
    }
    for _ in 0..refine_iters {
        let pts: Vec<[f64; 2]> = active
            .iter()
            .map(|&k| {
                let (lo, hi) = bracket[k].expect("active");
                at(&dirs[k], 0.5 * (lo + hi))
            })
            .collect();
        for (&k, v) in active.iter().zip(gap(&pts)?) {
            let (lo, hi) = bracket[k].expect("active");
            let mid = 0.5 * (lo + hi);
            bracket[k] = Some(if v != 0.0 && v.signum() == g0.signum() { (mid, hi) } else { (lo, mid) });
        }
    }
    Ok(active
        .iter()
        .map(|&k| {
            let (lo, hi) = bracket[k].expect("active");
            0.5 * (lo + hi)
        })
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_exponents() {
        assert_eq!(dual_exponent(2.0).unwrap(), 2.0);
        assert_eq!(dual_exponent(1.0).unwrap(), f64::INFINITY);
        assert_eq!(dual_exponent(f64::INFINITY).unwrap(), 1.0);
        assert!(dual_exponent(3.0).is_err());
    }

    #[test]
    fn hyperplane_distance_examples() {
        assert_eq!(hyperplane_distance(&[3.0, 4.0], 10.0, NormExponent::Two).unwrap(), 2.0);
        assert_eq!(hyperplane_distance(&[3.0, 4.0], 10.0, NormExponent::One).unwrap(), 2.5);
        assert_eq!(hyperplane_distance(&[3.0, 4.0], 10.0, NormExponent::Inf).unwrap(), 10.0 / 7.0);
        assert_eq!(hyperplane_distance(&[0.3, -1.0], 0.0, NormExponent::Two).unwrap(), 0.0);
        assert_eq!(hyperplane_distance(&[0.0, 0.0], 0.0, NormExponent::Inf).unwrap(), 0.0);
        assert!(matches!(hyperplane_distance(&[0.0, 0.0], 1.0, NormExponent::Two), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(margin_pair_penalty(-4.0, 2.0, 1.0, 0.0), 0.0);
        assert_eq!(margin_pair_penalty(-4.0, 2.0, 3.0, 0.0), 1.0);
        assert_eq!(margin_pair_penalty(2.0, 2.0, 1.0, 0.0), 2.0);
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[0.0, 2.0, 1.0], Aggregator::Max).unwrap(), 2.0);
        assert_eq!(aggregate(&[0.0, 2.0, 1.0], Aggregator::Sum).unwrap(), 3.0);
        assert_eq!(aggregate(&[1.5], Aggregator::Max).unwrap(), 1.5);
        assert_eq!(aggregate(&[1.5], Aggregator::Sum).unwrap(), 1.5);
        assert!(aggregate(&[], Aggregator::Sum).is_err());
    }

    #[test]
    fn linear_two_class_distance_is_exact() {
        // f_1 = x_1, f_2 = −x_1, boundary x_1 = 0
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let m = Model::linear(w, Tensor::zeros(&[2])).unwrap();
        let t = m.forward(&Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
        let d = approx_distance(&t, 0, 0, 1, 0, NormExponent::Two, 0.0).unwrap();
        assert_eq!((d.numerator, d.denominator, d.distance), (4.0, 2.0, 2.0));
    }

    #[test]
    fn logits_layer_denominator_is_one_hot_difference_norm() {
        let m = Model::mlp(3, &[4], 3, 5).unwrap();
        let t = m.forward(&Tensor::new(vec![1, 3], vec![0.2, 0.5, -0.1]).unwrap()).unwrap();
        let out = m.logits_layer();
        let expect = [(NormExponent::Inf, 2.0), (NormExponent::Two, 2f64.sqrt()), (NormExponent::One, 1.0)];
        for (p, den) in expect {
            let d = approx_distance(&t, 0, 2, 0, out, p, 0.0).unwrap();
            assert!((d.denominator - den).abs() < 1e-15, "{p}: {}", d.denominator);
        }
    }

    #[test]
    fn boundary_point_has_zero_distance() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap();
        let m = Model::linear(w, Tensor::zeros(&[2])).unwrap();
        let t = m.forward(&Tensor::new(vec![1, 2], vec![0.0, 0.7]).unwrap()).unwrap();
        assert_eq!(approx_distance(&t, 0, 0, 1, 0, NormExponent::Inf, 0.0).unwrap().distance, 0.0);
    }

    #[test]
    fn same_class_pair_is_rejected() {
        let m = Model::mlp(2, &[3], 2, 1).unwrap();
        let t = m.forward(&Tensor::zeros(&[1, 2])).unwrap();
        assert!(approx_distance(&t, 0, 1, 1, 0, NormExponent::Two, 0.0).is_err());
        assert!(approx_distance(&t, 1, 0, 1, 0, NormExponent::Two, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let m = Model::linear(Tensor::identity(4), Tensor::zeros(&[4])).unwrap();
        let mut t = m.forward(&Tensor::full(&[2, 4], 0.3)).unwrap();
        let l = cross_entropy_loss(&mut t, &[0, 3]).unwrap();
        assert!((t.graph.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let m2 = Model::linear(Tensor::identity(2), Tensor::zeros(&[2])).unwrap();
        let mut t = m2.forward(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap()).unwrap();
        let l = cross_entropy_loss(&mut t, &[0]).unwrap();
        let v = t.graph.value(l).item();
        assert!(v.is_finite() && v.abs() < 1e-12);

        for z in [-3.0, 0.0, 0.7, 5.0] {
            let mut t = m2.forward(&Tensor::new(vec![1, 2], vec![z, 0.0]).unwrap()).unwrap();
            let l = cross_entropy_loss(&mut t, &[0]).unwrap();
            let want = (1.0 + (-z as f64).exp()).ln();
            assert!((t.graph.value(l).item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_examples() {
        let m = Model::linear(Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        let mut t = m.forward(&Tensor::new(vec![1, 3], vec![5.0, 1.0, 2.0]).unwrap()).unwrap();
        let l = hinge_loss(&mut t, &[0], 1.0).unwrap();
        assert_eq!(t.graph.value(l).item(), 0.0);

        let m2 = Model::linear(Tensor::identity(2), Tensor::zeros(&[2])).unwrap();
        let mut t = m2.forward(&Tensor::new(vec![1, 2], vec![0.4, 0.4]).unwrap()).unwrap();
        let l = hinge_loss(&mut t, &[1], 1.0).unwrap();
        assert_eq!(t.graph.value(l).item(), 1.0);

        // f_y = 1, others 0.5 and 0.2 → violations 0.5 and 0.2
        let mut t = m.forward(&Tensor::new(vec![1, 3], vec![0.5, 1.0, 0.2]).unwrap()).unwrap();
        let l = hinge_loss(&mut t, &[1], 1.0).unwrap();
        assert!((t.graph.value(l).item() - 0.7).abs() < 1e-12);
        let mut t = m.forward(&Tensor::new(vec![1, 3], vec![0.5, 0.0, 0.2]).unwrap()).unwrap();
        let l = hinge_loss(&mut t, &[1], 1.0).unwrap();
        assert!((t.graph.value(l).item() - 2.7).abs() < 1e-12);
    }

    #[test]
    fn single_pair_loss_reduces_to_penalty() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let m = Model::linear(w, Tensor::zeros(&[2])).unwrap();
        let mut t = m.forward(&Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap()).unwrap();
        let mut cfg = MarginConfig::new(NormExponent::Two, LayerSet::INPUT, 3.0);
        cfg.xent_weight = 0.0;
        cfg.clip = Clip::Off;
        let out = margin_loss_batch(&mut t, &[0], &cfg).unwrap();
        let want = margin_pair_penalty(-4.0, 2.0, 3.0, cfg.epsilon);
        assert!((t.graph.value(out.loss).item() - want).abs() < 1e-15);
        assert_eq!(out.diagnostics.len(), 1);
    }

    #[test]
    fn top_competitors_order_and_ties() {
        let logits = Tensor::new(vec![2, 4], vec![0.0, 3.0, 3.0, 1.0, 9.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(top_competitors(&logits, &[0, 0], 2), vec![1, 2, 2, 3]);
        assert_eq!(top_competitors(&logits, &[1, 3], 3), vec![2, 3, 0, 0, 2, 1]);
    }

    #[test]
    fn config_resolution() {
        let cfg = MarginConfig::new(NormExponent::Inf, LayerSet::ALL, 2.0);
        let r = cfg.resolve(4, 10).unwrap();
        assert_eq!(r.layers, vec![0, 1, 2, 3]);
        assert_eq!(r.top_k, 9);
        assert_eq!(r.gammas, vec![2.0; 4]);
        let mut bad = cfg.clone();
        bad.top_k = Some(10);
        assert!(bad.resolve(4, 10).is_err());
        bad.top_k = Some(0);
        assert!(bad.resolve(4, 10).is_err());
        let mut bad = cfg.clone();
        bad.layers = LayerSet::Explicit(vec![0, 4]);
        assert!(bad.resolve(4, 10).is_err());
        let mut bad = cfg;
        bad.gamma_per_layer = Some(vec![1.0]);
        assert!(bad.resolve(4, 10).is_err());
    }

    #[test]
    fn config_json_defaults_and_clip_forms() {
        let c: MarginConfig = serde_json::from_str(r#"{"p":"inf","gamma":200}"#).unwrap();
        assert_eq!(c.clip, Clip::Auto);
        assert_eq!(c.clip.threshold(200.0), Some(2000.0));
        assert_eq!(c.epsilon, 1e-6);
        assert_eq!(c.aggregator, Aggregator::Max);
        assert_eq!(c.layers, LayerSet::ALL);
        assert_eq!(c.xent_weight, 1.0);
        let c: MarginConfig = serde_json::from_str(r#"{"p":"2","gamma":1,"clip":null,"layers":[0,2]}"#).unwrap();
        assert_eq!(c.clip, Clip::Off);
        assert_eq!(c.layers, LayerSet::Explicit(vec![0, 2]));
        let back: MarginConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        for text in [r#""auto""#, "3.5", "null"] {
            let c: MarginConfig = serde_json::from_str(&format!(r#"{{"p":"1","gamma":1,"clip":{text}}}"#)).unwrap();
            let back: MarginConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(serde_json::from_str::<MarginConfig>(r#"{"p":"1","gamma":1,"clip":"big"}"#).is_err());
    }

    #[test]
    fn oracle_rejects_wrong_dims_and_reports_missing_boundary() {
        let m = Model::mlp(3, &[2], 2, 0).unwrap();
        assert!(exact_distance_oracle_2d(&m, &[0.0, 0.0, 0.0], 0, 1, NormExponent::Two, &PolarGrid::default(), 10).is_err());
        // boundary x_1 = 0 is 5 away, outside a radius-1 window
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let lin = Model::linear(w, Tensor::zeros(&[2])).unwrap();
        let err = exact_distance_oracle_2d(&lin, &[5.0, 0.0], 0, 1, NormExponent::Two, &PolarGrid::default(), 10);
        assert!(matches!(err, Err(Error::NoBoundaryInWindow)));
    }

    #[test]
    fn oracle_on_boundary_is_zero() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let lin = Model::linear(w, Tensor::zeros(&[2])).unwrap();
        let d = exact_distance_oracle_2d(&lin, &[0.0, 0.3], 0, 1, NormExponent::Inf, &PolarGrid::default(), 40).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn norm_parsing() {
        assert_eq!("inf".parse::<NormExponent>().unwrap(), NormExponent::Inf);
        assert_eq!("l2".parse::<NormExponent>().unwrap(), NormExponent::Two);
        assert!("3".parse::<NormExponent>().is_err());
        assert_eq!("0,2".parse::<LayerSet>().unwrap(), LayerSet::Explicit(vec![0, 2]));
    }
}
