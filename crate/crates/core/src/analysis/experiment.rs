use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::model::{attach_adapters, build_model, evaluate_with, Example, Metrics, TinyTransformer, TinyTransformerConfig};
use crate::par::Exec;
use crate::train::{train_with, Method, TrainConfig, TrainLog, Trainable};

/// Builds a model from `config.seed` and trains every weight on `data`.
pub fn pretrain(
    model: &TinyTransformerConfig,
    data: &[Example],
    config: &TrainConfig,
    exec: Exec,
) -> Result<(TinyTransformer, TrainLog)> {
    let mut m = build_model(model, &Rng::new(config.seed).split("model"))?;
    let config = TrainConfig {
        method: Method::Full,
        ..config.clone()
    };
    attach_adapters(&mut m, &config)?;
    let log = train_with(&mut m, data, &config, exec)?;
    Ok((m, log))
}

/// Copies `base`, attaches adapters for `config.method` and trains them.
pub fn finetune(
    base: &TinyTransformer,
    data: &[Example],
    config: &TrainConfig,
    exec: Exec,
) -> Result<(TinyTransformer, TrainLog)> {
    let mut m = base.clone();
    attach_adapters(&mut m, config)?;
    let log = train_with(&mut m, data, config, exec)?;
    Ok((m, log))
}

/// Sum of the closed-form trainable counts of every attached adapter.
pub fn adapter_param_count(model: &TinyTransformer) -> usize {
    model.adapters().iter().map(|(_, _, a)| a.param_count()).sum()
}

/// A pretrained base, fine-tuning data, held-out data and a recipe.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub base: TinyTransformer,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    pub model: TinyTransformer,
    pub log: TrainLog,
    pub metrics: Metrics,
    /// Trainable entries in the adapted model.
    pub trainable: usize,
}

impl RunResult {
    /// `eval_loss, eval_accuracy, train_loss` (mean of the last 10 steps).
    pub fn metric_values(&self) -> Vec<f64> {
        vec![
            self.metrics.loss,
            self.metrics.accuracy,
            self.log.tail_loss(10).unwrap_or(f64::NAN),
        ]
    }
}

impl Experiment {
    pub fn new(base: TinyTransformer, train: Vec<Example>, eval: Vec<Example>, config: TrainConfig) -> Result<Self> {
        if train.is_empty() || eval.is_empty() {
            return Err(Error::invalid("experiment needs training and evaluation data"));
        }
        config.validate()?;
        Ok(Experiment {
            base,
            train,
            eval,
            config,
        })
    }

    pub fn run(&self) -> Result<RunResult> {
        self.run_config(&self.config, Exec::default())
    }

    pub fn run_config(&self, config: &TrainConfig, exec: Exec) -> Result<RunResult> {
        let (model, log) = finetune(&self.base, &self.train, config, exec)?;
        let metrics = evaluate_with(&model, &self.eval, exec)?;
        Ok(RunResult {
            config: config.clone(),
            trainable: model.trainable_count(),
            model,
            log,
            metrics,
        })
    }

    /// The untouched base on the evaluation data.
    pub fn baseline(&self) -> Result<Metrics> {
        evaluate_with(&self.base, &self.eval, Exec::default())
    }
}
