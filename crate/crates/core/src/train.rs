//! MLP classifier, SGD with momentum, step-decay schedule and the training
//! loop that couples cross-entropy on raw samples with a ranking-based
//! calibration term on their mixup companions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{fmt_f64, write_atomic, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{self, GroupConfidences, LossConfig, LossMode};
use crate::mixup::{self, BetaParams, MixupGroup};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) || self.classes < 2 {
            return Err(Error::contract(format!(
                "invalid model dimensions: input {}, hidden {:?}, classes {}",
                self.input_dim, self.hidden, self.classes
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Fully connected ReLU network. Parameters are stored as
/// `[w0, b0, w1, b1, ...]` with `w: fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

/// He initialisation (`std = sqrt(2 / fan_in)`) with zero biases.
pub fn init_model(spec: &ModelSpec) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.init_seed, stream::INIT);
    let mut params = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let std = (2.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        params.push(Tensor::matrix(fan_in, fan_out, w)?);
        params.push(Tensor::vector(vec![0.0; fan_out])?);
    }
    Ok(Mlp {
        spec: spec.clone(),
        params,
    })
}

impl Mlp {
    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if params.len() != 2 * dims.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                2 * dims.len(),
                params.len()
            )));
        }
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            if params[2 * l].shape() != [fan_in, fan_out] || params[2 * l + 1].shape() != [fan_out]
            {
                return Err(Error::Shape {
                    op: "mlp_layer",
                    left: vec![fan_in, fan_out],
                    right: params[2 * l].shape().to_vec(),
                });
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Logits for every row of `x`, without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let out = mlp_forward(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Forward pass through parameters `[w0, b0, w1, b1, ...]` already on the
/// graph. ReLU between layers, none after the last.
pub fn mlp_forward(g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = g.matmul(h, params[2 * l])?;
        h = g.add_row(h, params[2 * l + 1])?;
        if l + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub loss: LossConfig,
    pub q: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            decay_epochs: default_decay_epochs(60),
            decay_factor: 0.1,
            loss: LossConfig::default(),
            q: 4,
            alpha: 2.0,
            seed: 0,
        }
    }
}

/// Decays at 50% and 75% of training.
pub fn default_decay_epochs(epochs: usize) -> Vec<usize> {
    vec![epochs / 2, epochs * 3 / 4]
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            ));
        }
        if self.q < 2 {
            return fail(format!("group size q must be at least 2, got {}", self.q));
        }
        if self.loss.mode != LossMode::CeOnly && self.batch_size < 2 {
            return fail("mixup losses need a batch size of at least 2".into());
        }
        BetaParams::new(self.alpha)?;
        self.loss.validate()
    }
}

/// Learning rate after every decay epoch `≤ epoch` has applied.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr * cfg.decay_factor.powi(decays as i32)
}

/// `v ← momentum·v + g; p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::contract(
            "parameter, gradient and velocity counts differ",
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.numel() != g.len() || p.numel() != v.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Seeded shuffle of `0..n` cut into batches. A trailing batch of one
/// sample joins the previous batch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Mixed rows of all groups stacked sample-major: row `r·B + i` is the
/// `r`-th mixed sample of group `i`.
pub fn stack_mixed(groups: &[MixupGroup]) -> Result<Tensor> {
    let q = groups
        .first()
        .map(|g| g.q)
        .ok_or_else(|| Error::contract("no mixup groups"))?;
    let dim = groups[0].mixed_row(0).len();
    let mut data = Vec::with_capacity(groups.len() * (q - 1) * dim);
    for r in 0..q - 1 {
        for g in groups {
            data.extend_from_slice(g.mixed_row(r));
        }
    }
    Tensor::matrix(groups.len() * (q - 1), dim, data)
}

/// The per-batch training objective on a graph that already holds the
/// parameters.
///
/// Cross-entropy uses the raw rows and their labels. The calibration term
/// sees the maximum softmax probability of the raw rows and of their mixed
/// companions, all computed with the same parameters.
pub fn batch_objective(
    g: &mut Graph,
    params: &[Var],
    x: &Tensor,
    labels: &[usize],
    groups: &[MixupGroup],
    cfg: &LossConfig,
) -> Result<Var> {
    let xv = g.constant(x.clone());
    let logits = mlp_forward(g, params, xv)?;
    let ce = losses::cross_entropy(g, logits, labels)?;
    if cfg.mode == LossMode::CeOnly {
        return losses::total_loss(g, ce, None, cfg);
    }
    let b = labels.len();
    if groups.len() != b {
        return Err(Error::contract(format!(
            "{} mixup groups for a batch of {b}",
            groups.len()
        )));
    }
    let q = groups[0].q;
    let mixed = g.constant(stack_mixed(groups)?);
    let mixed_logits = mlp_forward(g, params, mixed)?;
    let mixed_probs = g.softmax(mixed_logits)?;
    let mixed_conf = g.max_over_classes(mixed_probs)?;
    let raw_probs = g.softmax(logits)?;
    let raw_conf = g.max_over_classes(raw_probs)?;
    let aug = (0..q - 1)
        .map(|r| g.slice_rows(mixed_conf, r * b, b))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = groups.iter().map(|grp| grp.lambdas.clone()).collect();
    let gc = GroupConfidences::new(g, raw_conf, aug, lambdas)?;
    let calib = losses::calibration_term(g, &gc, cfg)?;
    losses::total_loss(g, ce, calib, cfg)
}

/// Trained model plus the history needed to audit the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp,
    pub config: TrainConfig,
    pub epoch: usize,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    model: ModelSpec,
    config: TrainConfig,
    epoch: usize,
    train_losses: Vec<f64>,
    val_losses: Vec<f64>,
    val_accuracies: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "rankcal-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn final_train_loss(&self) -> f64 {
        self.train_losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.val_losses.last().copied().unwrap_or(f64::NAN)
    }

    /// A JSON header line followed by one CSV line per parameter tensor:
    /// `name,dims...,values...`.
    pub fn to_text(&self) -> Result<String> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            train_losses: self.train_losses.clone(),
            val_losses: self.val_losses.clone(),
            val_accuracies: self.val_accuracies.clone(),
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::contract(e.to_string()))?;
        out.push('\n');
        for (i, p) in self.model.params.iter().enumerate() {
            let name = if i % 2 == 0 { "weight" } else { "bias" };
            out.push_str(&format!("{name}{}", i / 2));
            for d in p.shape() {
                out.push_str(&format!(",{d}"));
            }
            for v in p.data() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty checkpoint".into(),
        })?;
        let header: CheckpointHeader =
            serde_json::from_str(header_line).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "unsupported checkpoint {} v{}",
                    header.format, header.version
                ),
            });
        }
        let dims = header.model.layer_dims();
        let mut params = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let bad = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split(',').collect();
            let (fan_in, fan_out) = *dims
                .get(params.len() / 2)
                .ok_or_else(|| bad("more parameter lines than layers".into()))?;
            let shape = if params.len() % 2 == 0 {
                vec![fan_in, fan_out]
            } else {
                vec![fan_out]
            };
            let expected = 1 + shape.len() + shape.iter().product::<usize>();
            if fields.len() != expected {
                return Err(bad(format!(
                    "expected {expected} fields, found {}",
                    fields.len()
                )));
            }
            for (d, f) in shape.iter().zip(&fields[1..]) {
                if f.parse::<usize>().ok() != Some(*d) {
                    return Err(bad(format!("dimension {f} does not match the model spec")));
                }
            }
            let values = fields[1 + shape.len()..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| bad(format!("invalid number {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, values)?);
        }
        Ok(Self {
            model: Mlp::from_params(header.model, params)?,
            config: header.config,
            epoch: header.epoch,
            train_losses: header.train_losses,
            val_losses: header.val_losses,
            val_accuracies: header.val_accuracies,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Mean cross-entropy and accuracy of `model` on `ds`.
pub fn evaluate(model: &Mlp, ds: &LabeledDataset) -> Result<(f64, f64)> {
    let logits = model.logits(&ds.features_tensor())?;
    let loss = crate::calibrate::nll_at(&logits, ds.labels(), 1.0);
    let hits = (0..ds.len())
        .filter(|&i| crate::numerics::first_argmax(logits.row(i)).0 == ds.labels()[i])
        .count();
    Ok((loss, hits as f64 / ds.len() as f64))
}

fn check_datasets(train: &LabeledDataset, val: &LabeledDataset, spec: &ModelSpec) -> Result<()> {
    if train.dim() != val.dim() || train.classes() != val.classes() {
        return Err(Error::contract(format!(
            "train ({}×{} classes) and val ({}×{} classes) disagree",
            train.dim(),
            train.classes(),
            val.dim(),
            val.classes()
        )));
    }
    if spec.input_dim != train.dim() || spec.classes != train.classes() {
        return Err(Error::contract(format!(
            "model expects {} inputs and {} classes, data has {} and {}",
            spec.input_dim,
            spec.classes,
            train.dim(),
            train.classes()
        )));
    }
    if train.len() < 2 {
        return Err(Error::contract("training needs at least two samples"));
    }
    Ok(())
}

/// One optimisation step on a batch; returns the batch loss.
fn train_step(
    model: &mut Mlp,
    velocity: &mut [Vec<f64>],
    x: &Tensor,
    labels: &[usize],
    groups: &[MixupGroup],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
    let loss = batch_objective(&mut g, &vars, x, labels, groups, &cfg.loss)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss is {value}")));
    }
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec)
        })
        .collect();
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    sgd_step(&mut model.params, &grads, velocity, lr, cfg.momentum)?;
    Ok(value)
}

/// Trains from a fresh initialisation.
///
/// Each epoch shuffles the training set with its own stream, and each batch
/// draws its mixup groups from a second stream, so the batch order does not
/// depend on the loss mode.
pub fn fit(
    train: &LabeledDataset,
    val: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    check_datasets(train, val, spec)?;
    let beta = BetaParams::new(cfg.alpha)?;
    let mut model = init_model(spec)?;
    let mut velocity: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut shuffle_rng = rng::seeded(cfg.seed, stream::SHUFFLE);
    let mut mixup_rng = rng::seeded(cfg.seed, stream::MIXUP);

    let mut train_losses = Vec::with_capacity(cfg.epochs);
    let mut val_losses = Vec::with_capacity(cfg.epochs);
    let mut val_accuracies = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0;
        for (b, batch) in epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng)
            .iter()
            .enumerate()
        {
            let x = train.batch_features(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels()[i]).collect();
            let groups = if cfg.loss.mode == LossMode::CeOnly {
                Vec::new()
            } else {
                mixup::build_groups(&x, cfg.q, beta, &mut mixup_rng)?
            };
            let loss = train_step(&mut model, &mut velocity, &x, &labels, &groups, cfg, lr)
                .map_err(|e| e.context(format!("epoch {epoch}, batch {b}")))?;
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_acc) = evaluate(&model, val)?;
        log::info!(
            "epoch {epoch}: lr {lr:.4} train loss {:.5} val loss {val_loss:.5} val acc {val_acc:.4}",
            loss_sum / train.len() as f64
        );
        train_losses.push(loss_sum / train.len() as f64);
        val_losses.push(val_loss);
        val_accuracies.push(val_acc);
    }
    Ok(Checkpoint {
        model,
        config: cfg.clone(),
        epoch: cfg.epochs,
        train_losses,
        val_losses,
        val_accuracies,
    })
}

/// `z0,...,z{K-1},label` with 17 significant digits.
pub fn logits_to_csv(logits: &Tensor, labels: &[usize]) -> String {
    let k = logits.cols();
    let header: Vec<String> = (0..k).map(|j| format!("z{j}")).collect();
    let mut out = header.join(",");
    out.push_str(",label\n");
    for (i, y) in labels.iter().enumerate() {
        for z in logits.row(i) {
            out.push_str(&fmt_f64(*z));
            out.push(',');
        }
        out.push_str(&y.to_string());
        out.push('\n');
    }
    out
}

/// Writes the logits of `checkpoint` on every row of `ds`.
pub fn dump_logits(checkpoint: &Checkpoint, ds: &LabeledDataset, path: &Path) -> Result<()> {
    let logits = checkpoint.model.logits(&ds.features_tensor())?;
    write_atomic(path, logits_to_csv(&logits, ds.labels()).as_bytes())
}

pub fn parse_logits(text: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty logits file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let k = cols.len().saturating_sub(1);
    let valid = k >= 2
        && cols.last() == Some(&"label")
        && cols[..k]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("z{j}"));
    if !valid {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header z0,...,label with at least two classes, found {header:?}"
            ),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k + 1 {
            return Err(bad(format!(
                "expected {} fields, found {}",
                k + 1,
                fields.len()
            )));
        }
        for f in &fields[..k] {
            let z: f64 = f
                .trim()
                .parse()
                .map_err(|_| bad(format!("invalid logit {f:?}")))?;
            if !z.is_finite() {
                return Err(bad(format!("non-finite logit {f:?}")));
            }
            data.push(z);
        }
        let y: usize = fields[k].trim().parse().map_err(|_| {
            bad(format!(
                "label {:?} is not a non-negative integer",
                fields[k]
            ))
        })?;
        if y >= k {
            return Err(bad(format!("label {y} is not below {k}")));
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no logit rows".into(),
        });
    }
    Ok((Tensor::matrix(labels.len(), k, data)?, labels))
}

pub fn read_logits(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_logits(&text).map_err(|e| e.context(path.display().to_string()))
}
