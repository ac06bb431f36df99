//! Input perturbations: FGSM, iterated FGSM, Gaussian noise, and accuracy
//! evaluation of a target model on examples crafted against a source model.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::margin::{cross_entropy_loss, hinge_loss};
use crate::net::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    Gaussian,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Ifgsm => "ifgsm",
            AttackKind::Gaussian => "gaussian",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "ifgsm" => Ok(AttackKind::Ifgsm),
            "gaussian" => Ok(AttackKind::Gaussian),
            other => Err(Error::config(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Loss whose input gradient drives the attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttackLoss {
    #[default]
    CrossEntropy,
    Hinge {
        margin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default)]
    pub epsilon: f64,
    /// IFGSM step; `ε/4` when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// IFGSM iterations; 10 when absent.
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(default)]
    pub sigma: f64,
    /// Optional `[lo, hi]` clamp applied after perturbing.
    #[serde(default)]
    pub pixel_bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub loss: AttackLoss,
    /// Noise seed for the Gaussian perturbation.
    #[serde(default)]
    pub seed: u64,
}

pub const DEFAULT_IFGSM_ITERS: usize = 10;

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: None,
            iters: None,
            sigma: 0.0,
            pixel_bounds: None,
            loss: AttackLoss::CrossEntropy,
            seed: 0,
        }
    }

    pub fn ifgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Ifgsm,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Gaussian,
            sigma,
            seed,
            ..Self::fgsm(0.0)
        }
    }

    /// The same attack at strength `strength`: `ε` for gradient attacks, `σ`
    /// for Gaussian noise.
    pub fn with_strength(&self, strength: f64) -> Self {
        let mut c = self.clone();
        match c.kind {
            AttackKind::Gaussian => c.sigma = strength,
            _ => c.epsilon = strength,
        }
        c
    }

    pub fn strength(&self) -> f64 {
        match self.kind {
            AttackKind::Gaussian => self.sigma,
            _ => self.epsilon,
        }
    }

    /// Step size and iteration count for IFGSM at this config's `ε`.
    pub fn ifgsm_schedule(&self) -> Result<(f64, usize)> {
        let alpha = self.alpha.unwrap_or(self.epsilon / 4.0);
        let iters = self.iters.unwrap_or(DEFAULT_IFGSM_ITERS);
        if self.epsilon > 0.0 {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::config("ifgsm step alpha must be positive"));
            }
            let needed = (self.epsilon / alpha).ceil();
            if (iters as f64) < needed {
                return Err(Error::config(format!(
                    "ifgsm needs iters >= ceil(eps/alpha) = {needed}, got {iters}"
                )));
            }
        }
        Ok((alpha, iters))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack epsilon must be a finite non-negative number"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("gaussian sigma must be a finite non-negative number"));
        }
        if let Some([lo, hi]) = self.pixel_bounds {
            if !(lo <= hi) {
                return Err(Error::config("pixel_bounds must satisfy lo <= hi"));
            }
        }
        if let AttackLoss::Hinge { margin } = self.loss {
            if !(margin > 0.0) {
                return Err(Error::config("hinge attack margin must be positive"));
            }
        }
        if self.kind == AttackKind::Ifgsm {
            self.ifgsm_schedule()?;
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `v` into the ball around `x` so that the computed `|v − x|` is at
/// most `eps`, stepping by one ulp where rounding of `x ± eps` overshoots.
fn clip_to_ball(v: f64, x: f64, eps: f64) -> f64 {
    let mut v = v.clamp(x - eps, x + eps);
    while v - x > eps {
        v = v.next_down();
    }
    while x - v > eps {
        v = v.next_up();
    }
    v
}

fn check_batch(model: &Model, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != model.input_dim() || x.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "attack input",
            lhs: vec![labels.len(), model.input_dim()],
            rhs: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// `∇_x L(x, y)` of the attack loss for a batch.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize], loss: AttackLoss) -> Result<Tensor> {
    check_batch(model, x, labels)?;
    let mut trace = model.forward(x)?;
    let l = match loss {
        AttackLoss::CrossEntropy => cross_entropy_loss(&mut trace, labels)?,
        AttackLoss::Hinge { margin } => hinge_loss(&mut trace, labels, margin)?,
    };
    let input = trace.input();
    let mut grads = trace.graph.backward_from(l, Tensor::scalar(1.0), Some(&[input]))?;
    Ok(grads.take(input).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

fn apply_bounds(data: &mut [f64], bounds: Option<[f64; 2]>) {
    if let Some([lo, hi]) = bounds {
        data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// `x̂ = x + ε·sign(∇_x L)`, then the optional pixel clamp.
pub fn fgsm(model: &Model, loss: AttackLoss, x: &Tensor, labels: &[usize], epsilon: f64, pixel_bounds: Option<[f64; 2]>) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::config("attack epsilon must be non-negative"));
    }
    check_batch(model, x, labels)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let grad = input_gradient(model, x, labels, loss)?;
    let mut out: Vec<f64> = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| clip_to_ball(xi + epsilon * sign(gi), xi, epsilon))
        .collect();
    apply_bounds(&mut out, pixel_bounds);
    finish(x, out, epsilon)
}

/// Iterated FGSM: `x̂ᵏ = Clip_{x,ε}(x̂ᵏ⁻¹ + α·sign(∇_x L(x̂ᵏ⁻¹)))` from `x̂⁰ = x`.
#[allow(clippy::too_many_arguments)]
pub fn ifgsm(
    model: &Model,
    loss: AttackLoss,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    iters: usize,
    pixel_bounds: Option<[f64; 2]>,
) -> Result<Tensor> {
    check_batch(model, x, labels)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    AttackConfig {
        alpha: Some(alpha),
        iters: Some(iters),
        ..AttackConfig::ifgsm(epsilon)
    }
    .validate()?;
    let mut cur = x.clone();
    for _ in 0..iters {
        let grad = input_gradient(model, &cur, labels, loss)?;
        let mut next: Vec<f64> = cur
            .data()
            .iter()
            .zip(grad.data())
            .zip(x.data())
            .map(|((&ci, &gi), &xi)| clip_to_ball(ci + alpha * sign(gi), xi, epsilon))
            .collect();
        apply_bounds(&mut next, pixel_bounds);
        cur = finish(x, next, epsilon)?;
    }
    Ok(cur)
}

fn finish(x: &Tensor, mut out: Vec<f64>, epsilon: f64) -> Result<Tensor> {
    // a pixel clamp may only move values toward x when x itself is in range;
    // re-project so the ball always wins
    for (v, &xi) in out.iter_mut().zip(x.data()) {
        *v = clip_to_ball(*v, xi, epsilon);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `x̂ = x + N(0, σ²)` elementwise, deterministic in `seed`.
pub fn gaussian_perturb(x: &Tensor, sigma: f64, seed: u64, pixel_bounds: Option<[f64; 2]>) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("gaussian sigma must be a finite non-negative number"));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<f64> = x.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    apply_bounds(&mut out, pixel_bounds);
    Tensor::new(x.shape().to_vec(), out)
}

/// Rows processed per gradient batch when attacking a dataset.
pub const ATTACK_CHUNK: usize = 500;

/// Perturbs every row of `x` with `config` using gradients of `source`.
pub fn perturb(source: &Model, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<Tensor> {
    config.validate()?;
    check_batch(source, x, labels)?;
    if config.kind == AttackKind::Gaussian {
        return gaussian_perturb(x, config.sigma, config.seed, config.pixel_bounds);
    }
    let mut parts = Vec::new();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + ATTACK_CHUNK).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let xb = x.select_rows(&idx)?;
        let yb = &labels[start..end];
        parts.push(match config.kind {
            AttackKind::Fgsm => fgsm(source, config.loss, &xb, yb, config.epsilon, config.pixel_bounds)?,
            AttackKind::Ifgsm => {
                let (alpha, iters) = config.ifgsm_schedule()?;
                ifgsm(source, config.loss, &xb, yb, config.epsilon, alpha, iters, config.pixel_bounds)?
            }
            AttackKind::Gaussian => unreachable!(),
        });
        start = end;
    }
    if parts.is_empty() {
        return Ok(x.clone());
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub epsilon: f64,
    pub source: String,
    pub target: String,
    pub attack_kind: AttackKind,
    pub accuracy: f64,
    /// Largest `|x̂ − x|` over all perturbed pixels.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub clean_accuracy: f64,
    pub rows: Vec<AttackRow>,
}

pub const ATTACK_CSV_HEADER: &str = "epsilon,source,target,attack_kind,accuracy";

impl AttackResult {
    pub fn accuracy_at(&self, epsilon: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.epsilon == epsilon).map(|r| r.accuracy)
    }
}

pub fn write_attack_csv<W: Write>(out: &mut W, rows: &[AttackRow], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(out, "{ATTACK_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epsilon, r.source, r.target, r.attack_kind.name(), r.accuracy)?;
    }
    Ok(())
}

/// For each strength in `eps_list`, crafts examples against `source` and
/// scores `target` on them. Passing the same model twice gives the
/// white-box evaluation.
pub fn evaluate_attack(
    source: (&str, &Model),
    target: (&str, &Model),
    dataset: &Dataset,
    config: &AttackConfig,
    eps_list: &[f64],
) -> Result<AttackResult> {
    let (src_name, src) = source;
    let (tgt_name, tgt) = target;
    if src.input_dim() != tgt.input_dim() || src.n_classes() != tgt.n_classes() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_attack models",
            lhs: vec![src.input_dim(), src.n_classes()],
            rhs: vec![tgt.input_dim(), tgt.n_classes()],
        });
    }
    if dataset.is_empty() {
        return Err(Error::Empty("attack dataset"));
    }
    let clean_accuracy = tgt.accuracy(&dataset.features, &dataset.labels)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let cfg = config.with_strength(eps);
        let adv = perturb(src, &dataset.features, &dataset.labels, &cfg)?;
        let max_deviation = adv
            .data()
            .iter()
            .zip(dataset.features.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        rows.push(AttackRow {
            epsilon: eps,
            source: src_name.to_string(),
            target: tgt_name.to_string(),
            attack_kind: cfg.kind,
            accuracy: tgt.accuracy(&adv, &dataset.labels)?,
            max_deviation,
        });
    }
    Ok(AttackResult { clean_accuracy, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-class linear model with logits `(0, w·x)`.
    fn linear(w: &[f64]) -> Model {
        let d = w.len();
        let mut weight = vec![0.0; d * 2];
        for (i, wi) in w.iter().enumerate() {
            weight[i * 2 + 1] = *wi;
        }
        Model::linear(Tensor::new(vec![d, 2], weight).unwrap(), Tensor::zeros(&[2])).unwrap()
    }

    #[test]
    fn fgsm_hand_example() {
        // class 0 true; ∇_x CE = softmax_1 · (w) so sign(∇) = sign(w)
        let m = linear(&[0.3, -0.2]);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let adv = fgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, None).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15);
        assert!((adv.data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_gives_zero_sign() {
        let m = linear(&[0.0, 1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let adv = fgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, None).unwrap();
        assert_eq!(adv.data()[0], 0.5);
    }

    #[test]
    fn ifgsm_telescopes_without_clipping() {
        let m = linear(&[1.0, -1.0, 2.0]);
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.4]).unwrap();
        let adv = ifgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, 0.02, 5, None).unwrap();
        let expect = [0.3, 0.6, 0.5];
        for (a, e) in adv.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn ifgsm_clips_to_ball() {
        let m = linear(&[1.0, -1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap();
        let adv = ifgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.05, 0.03, 10, None).unwrap();
        assert!((adv.data()[0] - 0.35).abs() < 1e-12 && (adv.data()[1] - 0.25).abs() < 1e-12);
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 0.05);
        }
    }

    #[test]
    fn ball_invariant_is_exact_for_awkward_values() {
        for &x in &[0.1, 0.7, 1.0 / 3.0, 0.123456789, 1e-9, 0.999999] {
            for &eps in &[0.1, 0.3, 1e-7, 0.0317] {
                for dir in [-1.0, 1.0] {
                    let v = clip_to_ball(x + dir * eps, x, eps);
                    assert!((v - x).abs() <= eps, "x={x} eps={eps}");
                }
            }
        }
    }

    #[test]
    fn epsilon_zero_is_identity() {
        let m = linear(&[1.0, 2.0]);
        let x = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(fgsm(&m, AttackLoss::CrossEntropy, &x, &[0, 1], 0.0, None).unwrap(), x);
        assert_eq!(ifgsm(&m, AttackLoss::CrossEntropy, &x, &[0, 1], 0.0, 0.5, 1, None).unwrap(), x);
    }

    #[test]
    fn ifgsm_iteration_floor_is_enforced() {
        let m = linear(&[1.0]);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert!(ifgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, 0.01, 9, None).is_err());
        assert!(ifgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, 0.01, 10, None).is_ok());
        assert_eq!(AttackConfig::ifgsm(0.1).ifgsm_schedule().unwrap(), (0.025, 10));
    }

    #[test]
    fn pixel_bounds_clamp() {
        let m = linear(&[1.0, -1.0]);
        let x = Tensor::new(vec![1, 2], vec![0.98, 0.01]).unwrap();
        let adv = fgsm(&m, AttackLoss::CrossEntropy, &x, &[0], 0.1, Some([0.0, 1.0])).unwrap();
        assert_eq!(adv.data(), &[1.0, 0.0]);
    }

    #[test]
    fn gaussian_statistics() {
        let n = 1_000_000;
        let x = Tensor::zeros(&[1000, n / 1000]);
        let sigma = 0.2;
        let y = gaussian_perturb(&x, sigma, 11, None).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 5.0 * sigma / 1e3);
        assert!((var.sqrt() - sigma).abs() < 0.01 * sigma);
        assert_eq!(y, gaussian_perturb(&x, sigma, 11, None).unwrap());
        assert_eq!(gaussian_perturb(&x, 0.0, 11, None).unwrap(), x);
    }

    #[test]
    fn evaluation_table_is_complete_and_eps_zero_is_clean() {
        let m = linear(&[1.0, -1.0]);
        let x = Tensor::new(vec![4, 2], vec![0.2, 0.8, 0.8, 0.2, 0.45, 0.5, 0.6, 0.5]).unwrap();
        let d = Dataset::new(x, vec![0, 1, 0, 1], 2, "t").unwrap();
        let eps = [0.0, 0.05, 0.2];
        let r = evaluate_attack(("a", &m), ("a", &m), &d, &AttackConfig::fgsm(0.0), &eps).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.accuracy_at(0.0), Some(r.clean_accuracy));
        assert!(r.rows.iter().all(|row| row.max_deviation <= row.epsilon));
        assert!(r.rows[2].accuracy <= r.clean_accuracy);
        let mut csv = Vec::new();
        write_attack_csv(&mut csv, &r.rows, true).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epsilon,source,target,attack_kind,accuracy\n0,a,a,fgsm,"));
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let a = linear(&[1.0, -1.0]);
        let b = linear(&[1.0, -1.0, 0.5]);
        let d = Dataset::new(Tensor::zeros(&[1, 2]), vec![0], 2, "t").unwrap();
        assert!(evaluate_attack(("a", &a), ("b", &b), &d, &AttackConfig::fgsm(0.1), &[0.1]).is_err());
    }
}
