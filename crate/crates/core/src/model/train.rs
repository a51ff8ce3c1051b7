//! Mini-batch training with AdamW (decoupled weight decay) on a cosine
//! schedule.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KatModel, Task};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Labels(Vec<usize>),
    /// `[N, outputs]`
    Values(Tensor<T>),
}

/// Inputs `[N, tokens, features]` with one target per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, targets: Targets<T>) -> Result<Self> {
        if inputs.rank() != 3 {
            return Err(Error::shape(format!(
                "dataset inputs {:?} should be [N, tokens, features]",
                inputs.shape()
            )));
        }
        let n = inputs.shape()[0];
        let m = match &targets {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => {
                if v.rank() != 2 {
                    return Err(Error::shape(format!(
                        "regression targets {:?} should be [N, outputs]",
                        v.shape()
                    )));
                }
                v.shape()[0]
            }
        };
        if n != m {
            return Err(Error::shape(format!("{n} inputs but {m} targets")));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// Number of classes (one past the largest label) or target width.
    pub fn outputs(&self) -> usize {
        match &self.targets {
            Targets::Labels(l) => l.iter().max().map_or(0, |m| m + 1),
            Targets::Values(v) => v.shape()[1],
        }
    }

    pub fn select(&self, idx: &[usize]) -> Result<Dataset<T>> {
        let row = self.tokens() * self.features();
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let inputs = Tensor::new([idx.len(), self.tokens(), self.features()], data)?;
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => {
                let w = v.shape()[1];
                let mut data = Vec::with_capacity(idx.len() * w);
                for &i in idx {
                    data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
                }
                Targets::Values(Tensor::new([idx.len(), w], data)?)
            }
        };
        Ok(Dataset { inputs, targets })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient to at most this norm.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("need 0 ≤ min_lr ≤ lr and lr > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::config("need 0 ≤ beta1, beta2 < 1 and eps > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate before update `step` (0-based) out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + (self.lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
}

/// One line per epoch; epoch 0 describes the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Full-dataset loss after the epoch.
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: Option<f64>,
    /// Mean global gradient norm over the epoch's updates.
    pub grad_norm: Option<f64>,
    /// Mixer output variance per block on the first evaluation batch.
    pub mixer_variances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_row(&self) -> &TraceRow {
        self.trace
            .last()
            .expect("trace always holds the initial row")
    }

    /// `epoch,step,lr,loss,accuracy,train_loss,grad_norm,var_block0,…`
    pub fn to_csv(&self) -> String {
        let blocks = self.trace.first().map_or(0, |r| r.mixer_variances.len());
        let mut out = String::from("epoch,step,lr,loss,accuracy,train_loss,grad_norm");
        for b in 0..blocks {
            out.push_str(&format!(",var_block{b}"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.step,
                r.lr,
                r.loss,
                opt(r.accuracy),
                opt(r.train_loss),
                opt(r.grad_norm)
            ));
            for v in &r.mixer_variances {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

const EVAL_BATCH: usize = 256;

fn check_task<T: Scalar>(model: &KatModel<T>, data: &Dataset<T>) -> Result<()> {
    let c = model.config();
    match (&data.targets, c.task) {
        (Targets::Labels(l), Task::Classification) => {
            if let Some(bad) = l.iter().find(|&&y| y >= c.outputs) {
                return Err(Error::shape(format!(
                    "label {bad} out of range for {} classes",
                    c.outputs
                )));
            }
        }
        (Targets::Values(v), Task::Regression) => {
            if v.shape()[1] != c.outputs {
                return Err(Error::shape(format!(
                    "regression targets have width {}, model predicts {}",
                    v.shape()[1],
                    c.outputs
                )));
            }
        }
        _ => return Err(Error::config("dataset targets do not match the model task")),
    }
    if data.tokens() != c.tokens || data.features() != c.token_features {
        return Err(Error::shape(format!(
            "dataset examples are [{}, {}], model expects [{}, {}]",
            data.tokens(),
            data.features(),
            c.tokens,
            c.token_features
        )));
    }
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    Ok(())
}

fn batch_loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Var,
    targets: &Targets<T>,
) -> Result<G::Var> {
    match targets {
        Targets::Labels(l) => g.cross_entropy(pred, l),
        Targets::Values(v) => {
            let t = g.constant(v.clone());
            g.mse(pred, &t)
        }
    }
}

/// Mean loss (and accuracy) over the whole dataset, plus the mixer output
/// variances on the first batch.
fn evaluate_full<T: Scalar>(
    model: &KatModel<T>,
    data: &Dataset<T>,
) -> Result<(EvalReport, Vec<f64>)> {
    check_task(model, data)?;
    let n = data.len();
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut variances = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let batch = data.select(&idx)?;
        let mut g = crate::tensor::Eager;
        let fwd = model.forward_graph(&mut g, &batch.inputs)?;
        if start == 0 {
            variances = fwd.mixer_outputs.iter().map(Tensor::variance).collect();
        }
        let l = batch_loss(&mut g, &fwd.output, &batch.targets)?;
        loss += l.data()[0].to_f64_lossless() * idx.len() as f64;
        if let Targets::Labels(labels) = &batch.targets {
            let classes = fwd.output.last_dim();
            for (row, &y) in fwd.output.data().chunks(classes).zip(labels) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                correct += usize::from(arg == y);
            }
        }
    }
    let accuracy = matches!(data.targets, Targets::Labels(_)).then(|| correct as f64 / n as f64);
    Ok((
        EvalReport {
            loss: loss / n as f64,
            accuracy,
        },
        variances,
    ))
}

pub fn evaluate<T: Scalar>(model: &KatModel<T>, data: &Dataset<T>) -> Result<EvalReport> {
    Ok(evaluate_full(model, data)?.0)
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new<T: Scalar>(model: &KatModel<T>) -> Self {
        AdamW {
            m: model
                .params()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect(),
            v: model
                .params()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect(),
            // Only dense weight matrices are decayed.
            decay: model
                .names()
                .iter()
                .map(|n| n.ends_with(".weight"))
                .collect(),
            t: 0,
        }
    }

    fn step<T: Scalar>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
        scale: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gv.to_f64_lossless() * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                let x = pv.to_f64_lossless();
                *pv = T::lit(x - lr * (update + wd * x));
            }
        }
    }
}

/// Trains in place. The returned trace starts with the untrained model's
/// loss and adds one row per epoch.
pub fn train<T: Scalar>(
    model: &mut KatModel<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_task(model, data)?;
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let (initial, variances) = evaluate_full(model, data)?;
    if !initial.loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            loss: initial.loss,
        });
    }
    let mut trace = vec![TraceRow {
        epoch: 0,
        step: 0,
        lr: cfg.lr_at(0, total),
        loss: initial.loss,
        accuracy: initial.accuracy,
        train_loss: None,
        grad_norm: None,
        mixer_variances: variances,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.select(idx)?;
            let mut tape = Tape::new();
            let fwd = model.forward_graph(&mut tape, &batch.inputs)?;
            let loss = batch_loss(&mut tape, &fwd.output, &batch.targets)?;
            let loss_value = tape.value(&loss).data()[0].to_f64_lossless();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: loss_value,
                });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = fwd
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.get_or_zeros(v, p))
                .collect();
            drop(tape);
            let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: loss_value,
                });
            }
            let scale = match cfg.clip_grad_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            lr = cfg.lr_at(step, total);
            opt.step(model.params_mut(), &grads, lr, scale, cfg);
            loss_sum += loss_value;
            norm_sum += norm;
            step += 1;
        }
        let (report, variances) = evaluate_full(model, data)?;
        if !report.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: report.loss,
            });
        }
        trace.push(TraceRow {
            epoch,
            step,
            lr,
            loss: report.loss,
            accuracy: report.accuracy,
            train_loss: Some(loss_sum / steps_per_epoch as f64),
            grad_norm: Some(norm_sum / steps_per_epoch as f64),
            mixer_variances: variances,
        });
    }
    Ok(TrainReport { trace, steps: step })
}
