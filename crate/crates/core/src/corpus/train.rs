use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::{qoi_score, ForwardOptions, QoiSpec, ToyTransformer};

use super::template::{CaseTag, Instance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Final learning rate as a fraction of `lr` (linear decay per step).
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Softmax cross-entropy over the whole vocabulary instead of the
    /// two-way correct/wrong logit pair.
    #[serde(default)]
    pub full_vocab: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            clip: 1.0,
            final_lr_fraction: 0.1,
            seed: 0,
            full_vocab: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub held_out: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n: usize,
    pub per_case: BTreeMap<CaseTag, f64>,
}

/// 1 for a positive qoi, 0.5 for an exact tie, 0 otherwise.
pub fn credit(q: f64) -> f64 {
    if q > 0.0 {
        1.0
    } else if q == 0.0 {
        0.5
    } else {
        0.0
    }
}

pub fn qoi_spec(inst: &Instance) -> QoiSpec {
    QoiSpec {
        position: inst.mask_pos,
        correct: inst.correct,
        wrong: inst.wrong,
    }
}

/// Accuracy overall and per case tag.
pub fn evaluate(model: &ToyTransformer, instances: &[Instance]) -> Result<Evaluation> {
    let scores: Vec<(CaseTag, f64)> = instances
        .par_iter()
        .map(|inst| {
            let logits = model.logits(&inst.ids)?;
            let q = qoi_score(&logits, inst.mask_pos, inst.correct, inst.wrong)?;
            Ok((inst.case, credit(q)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&scores))
}

pub fn summarize(scores: &[(CaseTag, f64)]) -> Evaluation {
    let mut per: BTreeMap<CaseTag, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (c, s) in scores {
        total += s;
        let e = per.entry(*c).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    Evaluation {
        accuracy: if scores.is_empty() { 0.0 } else { total / scores.len() as f64 },
        n: scores.len(),
        per_case: per.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and parameter gradients for one instance.
fn example_grads(model: &ToyTransformer, inst: &Instance, full_vocab: bool) -> Result<(f64, f64, Vec<Tensor>)> {
    let trace = model.forward(
        &inst.ids,
        &ForwardOptions {
            qoi: Some(qoi_spec(inst)),
            params_require_grad: true,
            ..Default::default()
        },
    )?;
    let q = trace.qoi_value().expect("qoi requested");
    let (loss, grads) = if full_vocab {
        let logits = trace.logits();
        let row = logits.row(inst.mask_pos);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let loss = max + z.ln() - row[inst.correct];
        let mut cot = Tensor::zeros(logits.shape());
        for (c, v) in row.iter().enumerate() {
            cot.data_mut()[inst.mask_pos * logits.cols() + c] = (v - max).exp() / z;
        }
        cot.data_mut()[inst.mask_pos * logits.cols() + inst.correct] -= 1.0;
        (loss, trace.tape.backward(trace.logits, &cot)?)
    } else {
        // -log sigmoid(q)
        let loss = if q > 0.0 { (-q).exp().ln_1p() } else { -q + q.exp().ln_1p() };
        let seed = Tensor::scalar(-sigmoid(-q));
        let qv = trace.qoi.expect("qoi requested");
        (loss, trace.tape.backward(qv, &seed)?)
    };
    let per_param = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss, credit(q), per_param))
}

/// Minibatch SGD with momentum, linear learning-rate decay and global norm
/// clipping. Single-threaded and fully determined by `cfg.seed`.
pub fn train(
    model: &mut ToyTransformer,
    instances: &[Instance],
    held_out: Option<&[Instance]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let steps_per_epoch = instances.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor> = velocity.iter().map(|v| Tensor::zeros(v.shape())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, hit, g) = example_grads(model, &instances[i], cfg.full_vocab).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged {
                        epoch,
                        step: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                batch_loss += loss;
                acc_sum += hit;
                for (a, gi) in acc.iter_mut().zip(&g) {
                    a.add_assign(gi);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for a in acc.iter_mut() {
                *a = a.scaled(scale);
                norm2 += a.data().iter().map(|v| v * v).sum::<f64>();
            }
            let norm = norm2.sqrt();
            let clip = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
            let frac = step as f64 / total_steps as f64;
            let lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            for ((p, v), g) in model.params_mut().into_iter().zip(velocity.iter_mut()).zip(&acc) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + clip * gv;
                    *pv -= lr * *vv;
                }
            }
            step += 1;
        }
        let n = instances.len().max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            train_accuracy: acc_sum / n,
        });
    }
    let held_out = held_out.map(|h| evaluate(model, h)).transpose()?;
    Ok(TrainReport { epochs, held_out })
}
