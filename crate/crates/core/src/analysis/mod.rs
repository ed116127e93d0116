//! Experiments on the toy transformer: single fine-tuning runs, sweeps over
//! one hyperparameter, layer-group comparisons, and router heatmaps.

mod experiment;
mod routing;
mod sweep;

pub use experiment::{adapter_param_count, finetune, pretrain, Experiment, RunResult};
pub use routing::{probe_batch, routing_heatmap, RoutingHeatmap};
pub use sweep::{
    heads_sweep, layer_group_report, population_variance, scaling_sweep, threshold_sweep, LayerGroupReport,
    SweepReport, SweepRow, METRICS,
};

#[cfg(test)]
mod tests;
