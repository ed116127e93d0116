use super::*;
use crate::adapters::Adapter;
use crate::linalg::{Matrix, Rng};
use crate::model::{
    attach_adapters, build_model, evaluate, gen_task, ProjKind, TaskKind, TaskSpec, TinyTransformer,
    TinyTransformerConfig,
};
use crate::par::Exec;
use crate::rank::rank_profile;
use crate::train::{default_config, Method, TrainConfig};

fn small(layers: usize) -> TinyTransformerConfig {
    TinyTransformerConfig {
        layers,
        d_model: 8,
        heads: 2,
        vocab: 5,
        max_len: 8,
        ffn_mult: 2,
    }
}

fn experiment(layers: usize, method: Method) -> Experiment {
    let base = build_model(&small(layers), &Rng::new(layers as u64)).unwrap();
    let spec = |seed| TaskSpec::new(TaskKind::LangB, 8, seed, 24).with_vocab(5);
    let config = TrainConfig {
        total_steps: 6,
        warmup_steps: 2,
        batch_size: 8,
        threshold: 0.5,
        heads: 3,
        ..default_config(method, "desk").unwrap()
    };
    Experiment::new(base, gen_task(&spec(1)).unwrap(), gen_task(&spec(2)).unwrap(), config).unwrap()
}

fn probe() -> Vec<Vec<usize>> {
    let tasks: Vec<TaskSpec> = [TaskKind::LangA, TaskKind::LangB, TaskKind::Copy]
        .iter()
        .map(|&k| TaskSpec::new(k, 4, 9, 1).with_vocab(5))
        .collect();
    probe_batch(&tasks)
}

fn mosara_model(heads: usize, seed: u64) -> TinyTransformer {
    let mut m = build_model(&small(3), &Rng::new(seed)).unwrap();
    let c = TrainConfig {
        heads,
        threshold: 0.6,
        ..default_config(Method::Mosara, "desk").unwrap()
    };
    attach_adapters(&mut m, &c).unwrap();
    m
}

#[test]
fn zero_gate_weights_route_uniformly() {
    let mut m = mosara_model(4, 1);
    for b in &mut m.blocks {
        for a in b.adapters.iter_mut().flatten() {
            if let Adapter::MoSara(ms) = a {
                ms.wg1.value = Matrix::zeros(ms.k(), 1);
            }
        }
    }
    let h = routing_heatmap(&m, &probe(), ProjKind::Q).unwrap();
    assert_eq!(h.values.shape(), (3, 4));
    assert!(h.values.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn single_head_is_all_ones() {
    let h = routing_heatmap(&mosara_model(1, 2), &probe(), ProjKind::V).unwrap();
    assert_eq!(h.values, Matrix::filled(3, 1, 1.0));
}

#[test]
fn heatmap_matches_recomputed_gates() {
    let mut m = mosara_model(5, 3);
    let mut rng = Rng::new(4);
    for p in m.adapter_params_mut() {
        if p.trainable {
            let (r, c) = p.value.shape();
            p.value = rng.uniform_matrix(r, c, 3.0);
        }
    }
    let probe = probe();
    let h = routing_heatmap(&m, &probe, ProjKind::Q).unwrap();
    for (row, layer) in h.layers.iter().enumerate() {
        let a = m.adapter(*layer, ProjKind::Q).unwrap().as_mosara().unwrap();
        let mut acc = vec![0.0; 5];
        let mut n = 0.0;
        for seq in &probe {
            let g = a.gate(&m.attention_input(seq, *layer).unwrap()).unwrap();
            for t in 0..g.rows() {
                acc.iter_mut().zip(g.row(t)).for_each(|(s, v)| *s += v);
                n += 1.0;
            }
        }
        for (c, s) in acc.iter().enumerate() {
            assert!((h.values.get(row, c) - s / n).abs() <= 1e-12);
        }
        let total: f64 = h.values.row(row).iter().sum();
        assert!((total - 1.0).abs() <= 1e-6);
        assert!(h.values.row(row).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(h.values.max_abs_diff(&Matrix::filled(3, 5, 0.2)).unwrap() > 1e-3);

    // Regenerated from a saved adapter checkpoint: bit-identical.
    let saved = crate::checkpoint::Checkpoint::from_bytes(&m.adapter_checkpoint().unwrap().to_bytes()).unwrap();
    let mut reloaded = build_model(&small(3), &Rng::new(3)).unwrap();
    reloaded.load_adapters(&saved).unwrap();
    let again = routing_heatmap(&reloaded, &probe, ProjKind::Q).unwrap();
    assert_eq!(again, h);
    assert_eq!(again.to_csv(), h.to_csv());
    assert_eq!(again.to_pgm(), h.to_pgm());
}

#[test]
fn heatmap_exports() {
    let h = routing_heatmap(&mosara_model(2, 5), &probe(), ProjKind::Q).unwrap();
    let csv = h.to_csv();
    assert!(csv.starts_with("layer,head,weight\n0,0,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let pgm = h.to_pgm();
    let header = b"P5\n2 3\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 6);
}

#[test]
fn heatmap_needs_mosara() {
    let mut m = build_model(&small(2), &Rng::new(6)).unwrap();
    assert!(routing_heatmap(&m, &probe(), ProjKind::Q).is_err());
    attach_adapters(&mut m, &default_config(Method::Sara, "desk").unwrap()).unwrap();
    assert!(routing_heatmap(&m, &probe(), ProjKind::Q).is_err());
    let m = mosara_model(2, 7);
    assert!(routing_heatmap(&m, &probe(), ProjKind::K).is_err());
    assert!(routing_heatmap(&m, &[], ProjKind::Q).is_err());
}

fn expected_mosara_params(exp: &Experiment, threshold: f64, heads: usize) -> usize {
    let ckpt = exp.base.to_checkpoint().unwrap();
    let profile = rank_profile(&ckpt, &["Q", "V"], &[threshold]).unwrap();
    let d = exp.base.d_model();
    profile
        .entries
        .iter()
        .map(|e| heads * e.k + e.k + heads + d)
        .sum()
}

#[test]
fn threshold_sweep_grows_parameters() {
    let exp = experiment(2, Method::Mosara);
    let thresholds = [0.7, 0.1, 0.5, 0.3];
    let report = threshold_sweep(&exp, &thresholds, Exec::default()).unwrap();
    let settings: Vec<f64> = report.rows.iter().map(|r| r.setting).collect();
    assert_eq!(settings, vec![0.1, 0.3, 0.5, 0.7]);
    for w in report.rows.windows(2) {
        assert!(w[0].params < w[1].params, "{:?}", report.rows);
    }
    for r in &report.rows {
        assert_eq!(r.params, expected_mosara_params(&exp, r.setting, 3));
        assert_eq!(r.metrics.len(), METRICS.len());
    }
    let csv = report.to_csv();
    assert!(csv.starts_with("setting,params,eval_loss,eval_accuracy,train_loss\n0.1,"));
    assert_eq!(threshold_sweep(&exp, &thresholds, Exec::Sequential).unwrap(), report);
}

#[test]
fn single_value_sweep_is_a_plain_run() {
    let exp = experiment(2, Method::Sara);
    let report = threshold_sweep(&exp, &[0.5], Exec::default()).unwrap();
    let run = exp.run().unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].metrics, run.metric_values());
    assert_eq!(report.rows[0].params, run.trainable);
}

#[test]
fn heads_sweep_adds_k_plus_one_per_head() {
    let exp = experiment(2, Method::Mosara);
    let report = heads_sweep(&exp, &[3, 5, 7, 9], Exec::default()).unwrap();
    assert_eq!(report.rows.len(), 4);
    let ckpt = exp.base.to_checkpoint().unwrap();
    let ks: usize = rank_profile(&ckpt, &["Q", "V"], &[0.5])
        .unwrap()
        .entries
        .iter()
        .map(|e| e.k + 1)
        .sum();
    for w in report.rows.windows(2) {
        assert_eq!(w[1].params - w[0].params, 2 * ks);
    }
    assert_eq!(heads_sweep(&exp, &[3, 5, 7, 9], Exec::default()).unwrap(), report);
    let one = heads_sweep(&exp, &[1], Exec::default()).unwrap();
    assert_eq!(one.rows[0].setting, 1.0);
    assert!(heads_sweep(&experiment(2, Method::Sara), &[1], Exec::default()).is_err());
}

#[test]
fn zero_scaling_matches_frozen() {
    let exp = experiment(2, Method::Lora);
    let report = scaling_sweep(&exp, &[0.0, 1.0], Exec::default()).unwrap();
    let base = exp.baseline().unwrap();
    assert_eq!(report.rows[0].metrics[0], base.loss);
    assert_eq!(report.rows[0].metrics[1], base.accuracy);
    assert_ne!(report.rows[1].metrics[0], base.loss);
    let grid = scaling_sweep(&exp, &[1.0, 2.0, 3.0, 4.0], Exec::default()).unwrap();
    assert_eq!(grid.rows.len(), 4);
    assert!(scaling_sweep(&experiment(2, Method::Sara), &[1.0], Exec::default()).is_err());
}

#[test]
fn lora_scaling_and_b_are_interchangeable() {
    let exp = experiment(2, Method::Lora);
    let mut a = exp.base.clone();
    attach_adapters(&mut a, &exp.config).unwrap();
    let mut rng = Rng::new(8);
    for b in &mut a.blocks {
        for ad in b.adapters.iter_mut().flatten() {
            if let Adapter::Lora(l) = ad {
                let (r, c) = l.b.value.shape();
                l.b.value = rng.uniform_matrix(r, c, 1.0);
            }
        }
    }
    let mut doubled = a.clone();
    for b in &mut doubled.blocks {
        for ad in b.adapters.iter_mut().flatten() {
            if let Adapter::Lora(l) = ad {
                l.scaling *= 2.0;
                l.b.value.scale_in_place(0.5);
            }
        }
    }
    let tokens = [1, 2, 3, 4];
    let diff = a.forward(&tokens).unwrap().max_abs_diff(&doubled.forward(&tokens).unwrap()).unwrap();
    assert!(diff < 1e-12);
}

#[test]
fn layer_groups() {
    let exp = experiment(8, Method::Sara);
    let groups = [(6, 7), (0, 1), (2, 3), (4, 5)];
    let rep = layer_group_report(&exp, &groups, Exec::default()).unwrap();
    assert_eq!(rep.report.rows.len(), 4);
    assert_eq!(rep.report.rows[0].label, "0..1");
    for (row, (a, b)) in rep.report.rows.iter().zip([(0, 1), (2, 3), (4, 5), (6, 7)]) {
        let run = exp
            .run_config(
                &TrainConfig {
                    layers: Some((a, b)),
                    ..exp.config.clone()
                },
                Exec::Sequential,
            )
            .unwrap();
        assert_eq!(run.model.adapters().len(), 2 * (b - a + 1));
        assert_eq!(row.metrics, run.metric_values());
    }
    for (i, v) in rep.variance.iter().enumerate() {
        let col: Vec<f64> = rep.report.rows.iter().map(|r| r.metrics[i]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let oracle = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((v - oracle).abs() <= 1e-15 * (1.0 + oracle));
    }
    assert!(layer_group_report(&exp, &[(0, 3), (3, 5)], Exec::default()).is_err());
    assert!(layer_group_report(&exp, &[], Exec::default()).is_err());

    let whole = layer_group_report(&exp, &[(0, 7)], Exec::default()).unwrap();
    assert_eq!(whole.report.rows[0].metrics, exp.run().unwrap().metric_values());
    assert_eq!(whole.variance, vec![0.0; 3]);
}

#[test]
fn sara_runs_beat_an_untrained_frozen_model_on_train_loss() {
    let exp = experiment(2, Method::Sara);
    let run = exp
        .run_config(
            &TrainConfig {
                total_steps: 40,
                lr: 3e-2,
                ..exp.config.clone()
            },
            Exec::default(),
        )
        .unwrap();
    assert!(run.metrics.loss < exp.baseline().unwrap().loss);
    assert_eq!(run.trainable, adapter_param_count(&run.model));
    assert_eq!(evaluate(&run.model, &exp.eval).unwrap(), run.metrics);
}
