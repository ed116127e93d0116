use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::par::Exec;

use super::config::{lr_at, TrainConfig};
use super::optim::adamw_step;
use super::Param;

/// Inverted dropout drawn from a dedicated stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    pub rng: Rng,
}

impl Dropout {
    /// Entries are 0 with probability `p`, otherwise `1/(1-p)`.
    pub fn mask(&mut self, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let rng = &mut self.rng;
        Matrix::from_fn(rows, cols, |_, _| if rng.bernoulli(p) { 0.0 } else { keep })
    }
}

/// Anything the training loop can optimize.
///
/// `named_params` and `params_mut` list the same parameters in the same
/// order, and `loss_and_grads` returns one gradient per parameter in that
/// order (zeros for frozen ones).
pub trait Trainable: Sync {
    type Example: Sync;

    fn named_params(&self) -> Vec<(String, &Param)>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn loss_and_grads(&self, example: &Self::Example, dropout: Option<Dropout>) -> Result<(f64, Vec<Matrix>)>;

    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.numel())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,grad_norm\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, r.grad_norm));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps (fewer if the log is shorter).
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }
}

/// Mean loss and mean gradients over a batch. Per-example work runs under
/// `exec`; the sum is always taken in batch order.
pub fn batch_gradients<M: Trainable>(
    model: &M,
    batch: &[&M::Example],
    dropout: f64,
    rng: &Rng,
    exec: Exec,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let results = exec.map(batch.len(), |i| {
        let drop = (dropout > 0.0).then(|| Dropout {
            p: dropout,
            rng: rng.split_index(i as u64),
        });
        model.loss_and_grads(batch[i], drop)
    });
    let trainable: Vec<bool> = model.named_params().iter().map(|(_, p)| p.trainable).collect();
    let mut loss = 0.0;
    let mut total: Option<Vec<Matrix>> = None;
    for r in results {
        let (l, grads) = r?;
        loss += l;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for ((a, g), &t) in acc.iter_mut().zip(&grads).zip(&trainable) {
                    if t {
                        a.add_assign(g)?;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = total.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.scale_in_place(scale));
    Ok((loss * scale, grads))
}

pub fn train<M: Trainable>(model: &mut M, data: &[M::Example], config: &TrainConfig) -> Result<TrainLog> {
    train_with(model, data, config, Exec::default())
}

/// Minibatch AdamW. Each epoch visits the data in a seeded shuffled order;
/// the final batch of an epoch may be short. Stops after
/// `config.resolved(data.len()).total_steps` updates.
pub fn train_with<M: Trainable>(
    model: &mut M,
    data: &[M::Example],
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let cfg = config.resolved(data.len());
    let root = Rng::new(cfg.seed).split("train");
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: for epoch in 0.. {
        let mut order: Vec<usize> = (0..data.len()).collect();
        root.split("shuffle").split_index(epoch).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= cfg.total_steps {
                break 'epochs;
            }
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &data[i]).collect();
            let drop_rng = root.split("dropout").split_index(step as u64);
            let (loss, grads) = batch_gradients(model, &batch, cfg.dropout, &drop_rng, exec)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    tensor: first_non_finite(model, &grads, loss),
                });
            }
            let mut params = model.params_mut();
            let mut sq = 0.0;
            for (p, g) in params.iter_mut().zip(grads) {
                if p.trainable {
                    sq += g.data().iter().map(|v| v * v).sum::<f64>();
                    p.grad = g;
                }
            }
            let lr = lr_at(step, &cfg);
            adamw_step(&mut params, &cfg, step);
            log.rows.push(LogRow {
                step,
                lr,
                loss,
                grad_norm: sq.sqrt(),
            });
            step += 1;
        }
    }
    Ok(log)
}

fn first_non_finite<M: Trainable>(model: &M, grads: &[Matrix], loss: f64) -> String {
    let named = model.named_params();
    if let Some((name, _)) = named.iter().find(|(_, p)| !p.value.is_finite()) {
        return name.clone();
    }
    if let Some(((name, _), _)) = named.iter().zip(grads).find(|(_, g)| !g.is_finite()) {
        return format!("grad of {name}");
    }
    if loss.is_finite() {
        "unknown".into()
    } else {
        "loss".into()
    }
}

/// One frozen linear layer `W₀` with an adapter in parallel and loss
/// `½‖x·W₀ + branch(x) − y‖²` per example. The smallest possible
/// fine-tuning problem.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    pub base: Param,
    pub adapter: Adapter,
}

/// One input row and its regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct Regression {
    pub x: Matrix,
    pub y: Matrix,
}

impl AdaptedLinear {
    pub fn new(base: Matrix, adapter: Adapter) -> Self {
        AdaptedLinear {
            base: Param::frozen(base),
            adapter,
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.adapter.forward(&self.base.value, x)
    }

    pub fn loss(&self, data: &[Regression]) -> Result<f64> {
        let mut total = 0.0;
        for ex in data {
            let r = self.predict(&ex.x)?.sub(&ex.y)?;
            total += 0.5 * r.data().iter().map(|v| v * v).sum::<f64>();
        }
        Ok(total / data.len() as f64)
    }
}

impl Trainable for AdaptedLinear {
    type Example = Regression;

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![("base".to_string(), &self.base)];
        out.extend(self.adapter.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.base];
        out.extend(self.adapter.params_mut());
        out
    }

    fn loss_and_grads(&self, ex: &Regression, dropout: Option<Dropout>) -> Result<(f64, Vec<Matrix>)> {
        let x_in = match dropout {
            Some(mut d) => ex.x.hadamard(&d.mask(ex.x.rows(), ex.x.cols()))?,
            None => ex.x.clone(),
        };
        let (branch, cache) = self.adapter.branch_train(&x_in)?;
        let r = ex.x.matmul(&self.base.value)?.add(&branch)?.sub(&ex.y)?;
        let loss = 0.5 * r.data().iter().map(|v| v * v).sum::<f64>();
        let (_, adapter_grads) = self.adapter.branch_backward(&cache, &r)?;
        let mut grads = vec![self.base.zeros_like()];
        grads.extend(adapter_grads);
        Ok((loss, grads))
    }
}
