use clockattn_core::autodiff::Tape;
use clockattn_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{AlignmentInstance, Dataset};
use super::metrics::{compute_metrics, Metrics, DEFAULT_WINDOW};
use super::model::ToyModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Steps between metric records; the first and last step are always logged.
    pub log_every: usize,
    /// Instances scored at each log record.
    pub eval_instances: usize,
    pub window: usize,
    /// Batch sampling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            steps: 5000,
            log_every: 500,
            eval_instances: 64,
            window: DEFAULT_WINDOW,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.log_every == 0 || self.eval_instances == 0 {
            return bad("batch_size, log_every and eval_instances must be positive");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: TrainConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Matrix], decay: Vec<bool>) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros(),
            v: zeros(),
            decay,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { c.lr * c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.adam_eps);
                *w -= c.lr * update + decay * *w;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean L1 of the batch that produced this step's update.
    pub batch_loss: f64,
    pub grad_norm: f64,
    pub logit_scale: f64,
    /// Alignment and L1 on the fixed evaluation subset before the update.
    pub eval: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub log: Vec<LogRecord>,
    /// Evaluation-subset metrics before the first and after the last update.
    pub initial: Metrics,
    pub final_metrics: Metrics,
}

/// Mean metrics of `model` over `instances`.
pub fn evaluate(model: &ToyModel, instances: &[AlignmentInstance], window: usize) -> Result<Metrics> {
    let mut all = Vec::with_capacity(instances.len());
    for inst in instances {
        let (pred, weights) = model.evaluate_instance(&inst.source_tokens, &inst.target)?;
        let l1 = pred
            .data()
            .iter()
            .zip(inst.target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pred.data().len() as f64;
        all.push(compute_metrics(&weights, &inst.gt_path, window).with_l1(l1));
    }
    Ok(Metrics::mean(&all))
}

/// One gradient of the mean-L1 batch loss; returns the loss and gradients.
pub fn batch_gradient(model: &ToyModel, batch: &[&AlignmentInstance]) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let vars = model.leaves(&mut tape);
    let mut total = None;
    for inst in batch {
        let l = model.loss(&mut tape, &vars, &inst.source_tokens, &inst.target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l),
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let grads = tape.backward(loss)?;
    let value = tape.value(loss)[(0, 0)];
    Ok((value, vars.iter().map(|&v| grads.wrt(v)).collect()))
}

/// Trains `model` on `dataset` with L1 loss.
///
/// Batches are drawn with replacement from a seeded stream, so the run is
/// a pure function of the model initialization, the data and `cfg`.
pub fn train(mut model: ToyModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.instances.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let eval_set = &dataset.instances[..cfg.eval_instances.min(dataset.instances.len())];
    let decay = model
        .param_names()
        .iter()
        .map(|n| !n.contains("_b") && *n != "logit_scale")
        .collect();
    let mut opt = AdamW::new(cfg, &model.params, decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let initial = evaluate(&model, eval_set, cfg.window)?;
    for step in 0..cfg.steps {
        let batch: Vec<&AlignmentInstance> = (0..cfg.batch_size)
            .map(|_| &dataset.instances[rng.random_range(0..dataset.instances.len())])
            .collect();
        let (loss, grads) = batch_gradient(&model, &batch)?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let eval = if step == 0 { initial } else { evaluate(&model, eval_set, cfg.window)? };
            log.push(LogRecord {
                step,
                batch_loss: loss,
                grad_norm,
                logit_scale: model.logit_scale(),
                eval,
            });
        }
        opt.step(&mut model.params, &grads);
        if let Some(i) = model.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: format!("parameter {} is not finite", model.param_names()[i]),
            });
        }
    }
    let final_metrics = evaluate(&model, eval_set, cfg.window)?;
    Ok(TrainOutcome {
        model,
        log,
        initial,
        final_metrics,
    })
}
