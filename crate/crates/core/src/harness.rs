//! Experiment orchestration: declarative configs, the training loop with
//! best-validation checkpoint selection, label-noise / data-fraction /
//! adversarial sweeps, and report emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_attack, perturb, write_attack_csv, AttackConfig, AttackRow};
use crate::data::{flip_labels, load_idx_dir, split, subsample, toy_two_class, Dataset, ToyPattern};
use crate::error::{Error, Result};
use crate::margin::{cross_entropy_loss, hinge_loss, margin_loss_batch, mean_layer_distances, LayerSet, MarginConfig, NormExponent};
use crate::net::Model;
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::tensor::{logsumexp, Tensor};

/// Rows of the training split used for distance monitoring.
pub const PROBE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl ModelSpec {
    /// Captured layers: input, one per hidden activation, logits.
    pub fn n_captured(&self) -> usize {
        self.hidden.len() + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Independent draws of the toy generator for each split.
    Toy {
        pattern: ToyPattern,
        train_per_class: usize,
        #[serde(default)]
        validation_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
        #[serde(default)]
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    /// An IDX image/label pair, partitioned into test, validation and train.
    Idx {
        dir: PathBuf,
        test_count: usize,
        validation_count: usize,
        #[serde(default)]
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossSpec {
    CrossEntropy,
    Hinge {
        #[serde(default = "one")]
        margin: f64,
        #[serde(default)]
        xent_weight: f64,
    },
    Margin(MarginConfig),
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn name(&self) -> String {
        match self {
            LossSpec::CrossEntropy => "cross_entropy".into(),
            LossSpec::Hinge { .. } => "hinge".into(),
            LossSpec::Margin(m) => format!("margin_l{}", m.p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLoss {
    pub name: String,
    pub loss: LossSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    #[default]
    Plain,
    Noisy {
        fractions: Vec<f64>,
        seeds: Vec<u64>,
    },
    Generalization {
        fractions: Vec<f64>,
        seeds: Vec<u64>,
    },
    /// Trains one model per entry of `models` (or the base loss alone) and
    /// attacks every ordered pair of them.
    Adversarial {
        attack: AttackConfig,
        epsilons: Vec<f64>,
        #[serde(default)]
        models: Vec<NamedLoss>,
    },
    /// Replaces `adv_fraction` of every batch with adversarial versions at a
    /// strength drawn uniformly from `epsilons`.
    AdvTrain {
        attack: AttackConfig,
        epsilons: Vec<f64>,
        #[serde(default = "half")]
        adv_fraction: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub loss: LossSpec,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: u64,
    #[serde(default)]
    pub distance_log_layers: Option<LayerSet>,
    /// Norm for logged distances; the margin norm (or `2`) when absent.
    #[serde(default)]
    pub distance_norm: Option<NormExponent>,
    #[serde(default)]
    pub task: Task,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if self.model.input_dim == 0 || self.model.hidden.contains(&0) || self.model.n_classes < 2 {
            return Err(Error::config("model dimensions must be positive with at least two classes"));
        }
        self.optimizer.validate()?;
        validate_loss(&self.loss, &self.model)?;
        if let Some(layers) = &self.distance_log_layers {
            layers.resolve(self.model.n_captured())?;
        }
        match &self.task {
            Task::Plain => {}
            Task::Noisy { fractions, seeds } => {
                check_grid(fractions, seeds)?;
                if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
                    return Err(Error::config("noise fractions must lie in [0, 1)"));
                }
            }
            Task::Generalization { fractions, seeds } => {
                check_grid(fractions, seeds)?;
                if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
                    return Err(Error::config("data fractions must lie in (0, 1]"));
                }
            }
            Task::Adversarial { attack, epsilons, models } => {
                check_epsilons(attack, epsilons)?;
                for m in models {
                    validate_loss(&m.loss, &self.model)?;
                }
            }
            Task::AdvTrain {
                attack,
                epsilons,
                adv_fraction,
            } => {
                check_epsilons(attack, epsilons)?;
                if !(0.0..=1.0).contains(adv_fraction) {
                    return Err(Error::config("adv_fraction must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn distance_norm(&self) -> NormExponent {
        self.distance_norm.unwrap_or(match &self.loss {
            LossSpec::Margin(m) => m.p,
            _ => NormExponent::Two,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn validate_loss(loss: &LossSpec, model: &ModelSpec) -> Result<()> {
    match loss {
        LossSpec::CrossEntropy => Ok(()),
        LossSpec::Hinge { margin, xent_weight } => {
            if !(*margin > 0.0) || !(*xent_weight >= 0.0) {
                return Err(Error::config("hinge needs a positive margin and non-negative xent_weight"));
            }
            Ok(())
        }
        LossSpec::Margin(m) => m.resolve(model.n_captured(), model.n_classes).map(|_| ()),
    }
}

fn check_grid(fractions: &[f64], seeds: &[u64]) -> Result<()> {
    if fractions.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweeps need at least one fraction and one seed"));
    }
    Ok(())
}

fn check_epsilons(attack: &AttackConfig, epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::config("attack tasks need at least one epsilon"));
    }
    for &e in epsilons {
        attack.with_strength(e).validate()?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn empty_like(d: &Dataset, what: &str) -> Result<Dataset> {
    d.subset(&[], format!("{} | {what} (empty)", d.provenance))
}

/// Materializes the train/validation/test splits described by `source`.
pub fn prepare_splits(source: &DataSource) -> Result<Splits> {
    match source {
        DataSource::Toy {
            pattern,
            train_per_class,
            validation_per_class,
            test_per_class,
            noise_sigma,
            seed,
        } => {
            let train = toy_two_class(*train_per_class, *pattern, *noise_sigma, *seed)?;
            let draw = |n: usize, offset: u64, what: &str| {
                if n == 0 {
                    empty_like(&train, what)
                } else {
                    toy_two_class(n, *pattern, *noise_sigma, seed.wrapping_add(offset))
                }
            };
            Ok(Splits {
                validation: draw(*validation_per_class, 1, "validation")?,
                test: draw(*test_per_class, 2, "test")?,
                train,
            })
        }
        DataSource::Idx {
            dir,
            test_count,
            validation_count,
            split_seed,
        } => {
            let all = load_idx_dir(dir)?;
            let (rest, test) = split(&all, *test_count, *split_seed)?;
            let (train, validation) = split(&rest, *validation_count, split_seed.wrapping_add(1))?;
            Ok(Splits { train, validation, test })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub split: String,
    pub accuracy: f64,
    /// Mean cross-entropy on the split.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub step: u64,
    pub layer: usize,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub metrics: Vec<MetricRow>,
    pub distances: Vec<DistanceRow>,
    pub attacks: Vec<AttackRow>,
    /// Step of the selected checkpoint: best validation accuracy, earliest on
    /// ties, or the last evaluated step without a validation split.
    pub best_step: u64,
    pub best_validation_accuracy: Option<f64>,
    /// Test accuracy of the selected checkpoint.
    pub test_accuracy: Option<f64>,
    pub model: Model,
    pub final_model: Model,
    pub train_digest: String,
    pub validation_digest: String,
    pub test_digest: String,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunReport {
    pub fn series(&self, split: &str) -> Vec<&MetricRow> {
        self.metrics.iter().filter(|m| m.split == split).collect()
    }

    pub fn distance_series(&self, layer: usize) -> Vec<(u64, f64)> {
        self.distances
            .iter()
            .filter(|d| d.layer == layer)
            .map(|d| (d.step, d.mean_distance))
            .collect()
    }
}

/// Accuracy and mean cross-entropy over a dataset, evaluated in chunks.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let (mut correct, mut xent) = (0usize, 0.0);
    let chunk = 1000;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.logits(&data.features.select_rows(&idx)?)?;
        let pred = logits.argmax_rows()?;
        for (b, &y) in data.labels[start..end].iter().enumerate() {
            correct += usize::from(pred[b] == y);
            let row = logits.row(b);
            xent += logsumexp(row) - row[y];
        }
        start = end;
    }
    Ok((correct as f64 / data.len() as f64, xent / data.len() as f64))
}

/// Builds the training loss for a batch and returns its value and parameter gradients.
pub fn loss_and_grads(model: &Model, loss: &LossSpec, x: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let mut trace = model.forward(x)?;
    let node = match loss {
        LossSpec::CrossEntropy => cross_entropy_loss(&mut trace, labels)?,
        LossSpec::Hinge { margin, xent_weight } => {
            let h = hinge_loss(&mut trace, labels, *margin)?;
            if *xent_weight > 0.0 {
                let x = cross_entropy_loss(&mut trace, labels)?;
                let g = &mut trace.graph;
                let w = g.scale(x, *xent_weight)?;
                g.add(h, w)?
            } else {
                h
            }
        }
        LossSpec::Margin(m) => margin_loss_batch(&mut trace, labels, m)?.loss,
    };
    let value = trace.graph.value(node).item();
    let mut grads = trace.graph.backward_from(node, Tensor::scalar(1.0), Some(&trace.param_nodes))?;
    let g = trace
        .param_nodes
        .iter()
        .zip(model.params())
        .map(|(&n, p)| grads.take(n).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

/// Seeded epoch-wise shuffler handing out minibatch indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}

/// Stream offsets so model init, shuffling and attack sampling never share a
/// random stream.
const SHUFFLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const ADV_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

/// Runs `config.steps` minibatch updates on `splits.train`.
pub fn train(config: &ExperimentConfig, splits: &Splits) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let spec = &config.model;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    for d in [&splits.train, &splits.validation, &splits.test] {
        if !d.is_empty() && (d.dim() != spec.input_dim || d.n_classes > spec.n_classes) {
            return Err(Error::config(format!(
                "data ({} features, {} classes) does not fit model ({} inputs, {} classes)",
                d.dim(),
                d.n_classes,
                spec.input_dim,
                spec.n_classes
            )));
        }
    }
    let mut model = Model::mlp(spec.input_dim, &spec.hidden, spec.n_classes, config.seed)?;
    let names = model.param_names();
    let mut state = OptimizerState::new(model.params());
    let mut sampler = BatchSampler::new(splits.train.len(), config.batch_size, config.seed ^ SHUFFLE_STREAM);
    let mut adv_rng = ChaCha8Rng::seed_from_u64(config.seed ^ ADV_STREAM);

    let log_layers = match &config.distance_log_layers {
        Some(l) => l.resolve(model.n_captured())?,
        None => Vec::new(),
    };
    let probe = splits.train.head(PROBE_SIZE)?;
    let dist_norm = config.distance_norm();

    let mut metrics = Vec::new();
    let mut distances = Vec::new();
    let mut best: Option<(f64, u64, Model, Option<f64>)> = None;

    let mut evaluate_at = |step: u64, model: &Model, metrics: &mut Vec<MetricRow>, distances: &mut Vec<DistanceRow>| -> Result<()> {
        let mut val_acc = None;
        let mut test_acc = None;
        for (name, data) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
            if data.is_empty() {
                continue;
            }
            let (accuracy, loss) = evaluate(model, data)?;
            match name {
                "validation" => val_acc = Some(accuracy),
                "test" => test_acc = Some(accuracy),
                _ => {}
            }
            metrics.push(MetricRow {
                step,
                split: name.to_string(),
                accuracy,
                loss,
            });
        }
        if !log_layers.is_empty() {
            for (layer, mean_distance) in mean_layer_distances(model, &probe, &log_layers, dist_norm, 1e-6)? {
                distances.push(DistanceRow { step, layer, mean_distance });
            }
        }
        let better = match (&best, val_acc) {
            (None, _) => true,
            (Some((b, ..)), Some(v)) => v > *b,
            (Some(_), None) => true,
        };
        if better {
            best = Some((val_acc.unwrap_or(0.0), step, model.clone(), test_acc));
        }
        Ok(())
    };

    evaluate_at(0, &model, &mut metrics, &mut distances)?;
    for step in 0..config.steps {
        let idx = sampler.next().to_vec();
        let mut xb = splits.train.features.select_rows(&idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| splits.train.labels[i]).collect();
        if let Task::AdvTrain {
            attack,
            epsilons,
            adv_fraction,
        } = &config.task
        {
            xb = adversarial_batch(&model, xb, &yb, attack, epsilons, *adv_fraction, &mut adv_rng)?;
        }
        let diverged = |detail: String, model: &Model| Error::Diverged {
            step,
            detail,
            last_good: Some(Box::new(model.clone())),
        };
        let (loss, grads) = loss_and_grads(&model, &config.loss, &xb, &yb)?;
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}"), &model));
        }
        let before = model.clone();
        match optim::step(model.params_mut(), &grads, &names, &mut state, &config.optimizer) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { param, .. }) => {
                return Err(diverged(format!("non-finite gradient in `{param}`"), &before));
            }
            Err(e) => return Err(e),
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged("parameters became non-finite".into(), &before));
        }
        let done = step + 1;
        if done % config.eval_every == 0 {
            evaluate_at(done, &model, &mut metrics, &mut distances)?;
        }
    }

    let (best_val, best_step, best_model, test_accuracy) = best.expect("step 0 is always evaluated");
    let mut attacks = Vec::new();
    if let Task::AdvTrain { attack, epsilons, .. } = &config.task {
        if !splits.test.is_empty() {
            let r = evaluate_attack(("model", &best_model), ("model", &best_model), &splits.test, attack, epsilons)?;
            attacks = r.rows;
        }
    }
    Ok(RunReport {
        config: config.clone(),
        metrics,
        distances,
        attacks,
        best_step,
        best_validation_accuracy: (!splits.validation.is_empty()).then_some(best_val),
        test_accuracy,
        model: best_model,
        final_model: model,
        train_digest: splits.train.digest(),
        validation_digest: splits.validation.digest(),
        test_digest: splits.test.digest(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint_path: None,
    })
}

fn adversarial_batch(
    model: &Model,
    xb: Tensor,
    yb: &[usize],
    attack: &AttackConfig,
    epsilons: &[f64],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n_adv = crate::data::round_half_up(fraction * yb.len() as f64).min(yb.len());
    let eps = epsilons[rng.random_range(0..epsilons.len())];
    if n_adv == 0 {
        return Ok(xb);
    }
    let head: Vec<usize> = (0..n_adv).collect();
    let tail: Vec<usize> = (n_adv..yb.len()).collect();
    let mut cfg = attack.with_strength(eps);
    cfg.seed = rng.random();
    let adv = perturb(model, &xb.select_rows(&head)?, &yb[..n_adv], &cfg)?;
    Tensor::concat_rows(&[&adv, &xb.select_rows(&tail)?])
}

/// One run of a sweep grid.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub fraction: f64,
    pub seed: u64,
    pub report: RunReport,
}

pub const SWEEP_CSV_HEADER: &str = "fraction,seed,loss,best_step,validation_accuracy,test_accuracy,train_digest";

pub fn write_sweep_csv<W: Write>(out: &mut W, runs: &[SweepRun]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in runs {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fraction,
            r.seed,
            r.report.config.loss.name(),
            r.report.best_step,
            fmt(r.report.best_validation_accuracy),
            fmt(r.report.test_accuracy),
            r.report.train_digest
        )?;
    }
    Ok(())
}

fn sweep_with(
    base: &ExperimentConfig,
    splits: &Splits,
    fractions: &[f64],
    seeds: &[u64],
    corrupt: impl Fn(&Dataset, f64, u64) -> Result<Dataset>,
) -> Result<Vec<SweepRun>> {
    let mut runs = Vec::with_capacity(fractions.len() * seeds.len());
    for &seed in seeds {
        for &fraction in fractions {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.task = Task::Plain;
            let run_splits = Splits {
                train: corrupt(&splits.train, fraction, seed)?,
                validation: splits.validation.clone(),
                test: splits.test.clone(),
            };
            let report = train(&cfg, &run_splits)?;
            runs.push(SweepRun { fraction, seed, report });
        }
    }
    Ok(runs)
}

/// One run per `(fraction, seed)` with that fraction of training labels flipped.
pub fn sweep_noise(base: &ExperimentConfig, splits: &Splits, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SweepRun>> {
    sweep_with(base, splits, fractions, seeds, flip_labels)
}

/// One run per `(fraction, seed)` on a subsample of the training split. The
/// subset depends only on `(fraction, seed)`, so every loss sees the same data.
pub fn sweep_generalization(base: &ExperimentConfig, splits: &Splits, fractions: &[f64], seeds: &[u64]) -> Result<Vec<SweepRun>> {
    sweep_with(base, splits, fractions, seeds, subsample)
}

/// White-box rows for every model and black-box rows for every ordered pair.
pub fn sweep_adversarial(models: &[(String, Model)], dataset: &Dataset, attack: &AttackConfig, epsilons: &[f64]) -> Result<Vec<AttackRow>> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    let mut rows = Vec::new();
    for (sname, src) in models {
        for (tname, tgt) in models {
            let r = evaluate_attack((sname, src), (tname, tgt), dataset, attack, epsilons)?;
            rows.extend(r.rows);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_step: u64,
    pub best_validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub checkpoint: String,
    pub train_digest: String,
    pub validation_digest: String,
    pub test_digest: String,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|()| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "step,split,accuracy,loss")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.split, r.accuracy, r.loss)?;
    }
    Ok(())
}

pub fn write_distances_csv<W: Write>(out: &mut W, rows: &[DistanceRow]) -> std::io::Result<()> {
    writeln!(out, "step,layer,mean_distance")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.layer, r.mean_distance)?;
    }
    Ok(())
}

/// Writes metrics.csv, distances.csv, attacks.csv, config.json, the selected
/// checkpoint and summary.json into `out_dir`. Nothing time-dependent is
/// written, so reruns are byte-identical.
pub fn emit_report(report: &mut RunReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("metrics.csv"), |w| write_metrics_csv(w, &report.metrics))?;
    write_file(&out_dir.join("distances.csv"), |w| write_distances_csv(w, &report.distances))?;
    write_file(&out_dir.join("attacks.csv"), |w| write_attack_csv(w, &report.attacks, true))?;
    write_file(&out_dir.join("config.json"), |w| writeln!(w, "{}", report.config.to_json()))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    report.model.save(&ckpt)?;
    report.checkpoint_path = Some(ckpt);
    let summary = Summary {
        best_step: report.best_step,
        best_validation_accuracy: report.best_validation_accuracy,
        test_accuracy: report.test_accuracy,
        checkpoint: CHECKPOINT_FILE.to_string(),
        train_digest: report.train_digest.clone(),
        validation_digest: report.validation_digest.clone(),
        test_digest: report.test_digest.clone(),
    };
    write_file(&out_dir.join("summary.json"), |w| {
        writeln!(w, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))
    })
}

/// Directory name for one sweep run.
pub fn run_dir_name(fraction: f64, seed: u64) -> String {
    format!("fraction-{fraction}-seed-{seed}")
}

/// Writes each run into its own directory plus a top-level sweep.csv.
pub fn emit_sweep(runs: &mut [SweepRun], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in runs.iter_mut() {
        emit_report(&mut r.report, &out_dir.join(run_dir_name(r.fraction, r.seed)))?;
    }
    write_file(&out_dir.join("sweep.csv"), |w| write_sweep_csv(w, runs))
}

/// Result of an adversarial task: the trained reports plus the attack table.
#[derive(Debug, Clone)]
pub struct AdversarialOutcome {
    pub reports: Vec<(String, RunReport)>,
    pub attacks: Vec<AttackRow>,
}

/// Trains every model of an `Adversarial` task and attacks all pairs on the test split.
pub fn run_adversarial(config: &ExperimentConfig, splits: &Splits) -> Result<AdversarialOutcome> {
    let Task::Adversarial { attack, epsilons, models } = &config.task else {
        return Err(Error::config("run_adversarial needs an adversarial task"));
    };
    let variants: Vec<NamedLoss> = if models.is_empty() {
        vec![NamedLoss {
            name: config.loss.name(),
            loss: config.loss.clone(),
        }]
    } else {
        models.clone()
    };
    let mut reports = Vec::with_capacity(variants.len());
    for v in &variants {
        let mut cfg = config.clone();
        cfg.loss = v.loss.clone();
        cfg.task = Task::Plain;
        reports.push((v.name.clone(), train(&cfg, splits)?));
    }
    let eval_set = if splits.test.is_empty() { &splits.validation } else { &splits.test };
    let named: Vec<(String, Model)> = reports.iter().map(|(n, r)| (n.clone(), r.model.clone())).collect();
    let attacks = sweep_adversarial(&named, eval_set, attack, epsilons)?;
    Ok(AdversarialOutcome { reports, attacks })
}

pub fn emit_adversarial(outcome: &mut AdversarialOutcome, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, report) in outcome.reports.iter_mut() {
        emit_report(report, &out_dir.join(name.as_str()))?;
    }
    write_file(&out_dir.join("attacks.csv"), |w| write_attack_csv(w, &outcome.attacks, true))
}
