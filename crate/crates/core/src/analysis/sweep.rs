use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::train::{Method, TrainConfig};

use super::experiment::{adapter_param_count, Experiment, RunResult};

/// Metric columns of every sweep row.
pub const METRICS: [&str; 3] = ["eval_loss", "eval_accuracy", "train_loss"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: f64,
    /// Printed in the `setting` column.
    pub label: String,
    /// Closed-form trainable count of the attached adapters.
    pub params: usize,
    pub metrics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// What the setting column holds, e.g. `threshold`.
    pub kind: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// `setting,params,eval_loss,eval_accuracy,train_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("setting,params,{}\n", METRICS.join(","));
        for r in &self.rows {
            let m: Vec<String> = r.metrics.iter().map(f64::to_string).collect();
            out.push_str(&format!("{},{},{}\n", r.label, r.params, m.join(",")));
        }
        out
    }

    pub fn column(&self, metric: &str) -> Option<Vec<f64>> {
        let i = METRICS.iter().position(|m| *m == metric)?;
        Some(self.rows.iter().map(|r| r.metrics[i]).collect())
    }
}

fn row(setting: f64, label: String, run: &RunResult) -> SweepRow {
    SweepRow {
        setting,
        label,
        params: adapter_param_count(&run.model),
        metrics: run.metric_values(),
    }
}

/// One run per value of a single hyperparameter, all from the experiment's
/// seed. Runs execute under `exec`; rows come back sorted by setting.
fn sweep(
    exp: &Experiment,
    kind: &str,
    values: &[f64],
    exec: Exec,
    apply: impl Fn(&mut TrainConfig, f64) -> Result<()> + Sync,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::invalid(format!("{kind} sweep needs at least one value")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let configs = sorted
        .iter()
        .map(|&v| {
            let mut c = exp.config.clone();
            apply(&mut c, v)?;
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = exec.map(configs.len(), |i| exp.run_config(&configs[i], exec));
    let rows = runs
        .into_iter()
        .zip(&sorted)
        .map(|(r, &v)| r.map(|run| row(v, v.to_string(), &run)))
        .collect::<Result<_>>()?;
    Ok(SweepReport {
        kind: kind.to_string(),
        rows,
    })
}

pub fn threshold_sweep(exp: &Experiment, thresholds: &[f64], exec: Exec) -> Result<SweepReport> {
    sweep(exp, "threshold", thresholds, exec, |c, t| {
        c.threshold = t;
        Ok(())
    })
}

pub fn heads_sweep(exp: &Experiment, heads: &[usize], exec: Exec) -> Result<SweepReport> {
    if exp.config.method != Method::Mosara {
        return Err(Error::invalid("heads sweep needs method mosara"));
    }
    let values: Vec<f64> = heads.iter().map(|&h| h as f64).collect();
    sweep(exp, "heads", &values, exec, |c, h| {
        c.heads = h as usize;
        Ok(())
    })
}

pub fn scaling_sweep(exp: &Experiment, scalings: &[f64], exec: Exec) -> Result<SweepReport> {
    if exp.config.method != Method::Lora {
        return Err(Error::invalid("scaling sweep needs method lora"));
    }
    sweep(exp, "scaling", scalings, exec, |c, s| {
        c.lora_scaling = s;
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroupReport {
    pub report: SweepReport,
    /// Population variance of each metric column across groups.
    pub variance: Vec<f64>,
}

pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// One fine-tune per inclusive layer range with adapters only there.
pub fn layer_group_report(exp: &Experiment, groups: &[(usize, usize)], exec: Exec) -> Result<LayerGroupReport> {
    if groups.is_empty() {
        return Err(Error::invalid("no layer groups given"));
    }
    let mut sorted = groups.to_vec();
    sorted.sort();
    for &(a, b) in &sorted {
        if a > b {
            return Err(Error::invalid(format!("empty layer group {a}..{b}")));
        }
    }
    for w in sorted.windows(2) {
        if w[1].0 <= w[0].1 {
            return Err(Error::invalid(format!(
                "layer groups {}..{} and {}..{} overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    let configs: Vec<TrainConfig> = sorted
        .iter()
        .map(|&g| TrainConfig {
            layers: Some(g),
            ..exp.config.clone()
        })
        .collect();
    let runs = exec.map(configs.len(), |i| exp.run_config(&configs[i], exec));
    let rows: Vec<SweepRow> = runs
        .into_iter()
        .zip(&sorted)
        .map(|(r, &(a, b))| r.map(|run| row(a as f64, format!("{a}..{b}"), &run)))
        .collect::<Result<_>>()?;
    let variance = (0..METRICS.len())
        .map(|i| population_variance(&rows.iter().map(|r| r.metrics[i]).collect::<Vec<_>>()))
        .collect();
    Ok(LayerGroupReport {
        report: SweepReport {
            kind: "layers".into(),
            rows,
        },
        variance,
    })
}
