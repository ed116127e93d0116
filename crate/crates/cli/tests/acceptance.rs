//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use serde_json::Value;

use sara::adapters::{Adapter, InitMode, LoraAdapter, MoSaraAdapter, SaraAdapter, VMode};
use sara::analysis::{finetune, pretrain, probe_batch, routing_heatmap, threshold_sweep, Experiment};
use sara::checkpoint::Checkpoint;
use sara::linalg::svd;
use sara::model::{
    attach_adapters, evaluate, gen_task, Example, ProjKind, TaskKind, TaskSpec, TinyTransformer,
    TinyTransformerConfig,
};
use sara::par::Exec;
use sara::rank::{calculate_k, k_from_weight, rank_profile};
use sara::train::{default_config, AdaptedLinear, Method, Regression, TrainConfig, Trainable};
use sara::{Matrix, Rng};

use common::{read_logits, sara_ok};

const THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

// ---------------------------------------------------------------- 1

/// Recomputes every prefix sum from scratch and takes the first that reaches
/// the target.
fn brute_force_k(s: &[f64], t: f64) -> usize {
    let total: f64 = s.iter().sum();
    (1..=s.len())
        .find(|&k| s[..k].iter().sum::<f64>() + 1e-12 * total >= t * total)
        .unwrap_or(s.len())
}

fn rank_oracle() -> Result<String> {
    let mut rng = Rng::new(1);
    let (mut cases, mut mismatches) = (0, 0);
    for i in 0..100 {
        let rows = 2 + rng.below(63);
        let cols = if i % 3 == 0 { rows } else { 2 + rng.below(63) };
        let w = rng.uniform_matrix(rows, cols, 1.0);
        let s = svd(&w)?.s;
        for t in THRESHOLDS {
            cases += 1;
            if calculate_k(&s, t)? != brute_force_k(&s, t) {
                mismatches += 1;
            }
        }
    }
    ensure!(mismatches == 0, "{mismatches} mismatches over {cases} cases");
    Ok(format!("0 mismatches over {cases} cases"))
}

// ---------------------------------------------------------------- 2

fn frob(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// Orthonormal basis of a random `k`-dimensional subspace of R^n, as columns.
fn random_basis(rng: &mut Rng, n: usize, k: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

fn svd_quality() -> Result<String> {
    let mut rng = Rng::new(2);
    let (mut worst_rec, mut worst_orth, mut ey_checks) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let (rows, cols) = (2 + rng.below(31), 2 + rng.below(31));
        let a = rng.uniform_matrix(rows, cols, 1.0);
        let f = svd(&a)?;
        let rec = frob(&a.sub(&f.reconstruct())?) / frob(&a);
        let r = f.u.cols();
        let uu = f.u.t_matmul(&f.u)?.sub(&Matrix::identity(r))?.max_abs();
        let vv = f.vt.matmul_t(&f.vt)?.sub(&Matrix::identity(f.vt.rows()))?.max_abs();
        worst_rec = worst_rec.max(rec);
        worst_orth = worst_orth.max(uu).max(vv);

        let k = 1 + rng.below(rows.min(cols) - 1);
        let best = frob(&a.sub(&f.truncate(k)?.reconstruct())?);
        for _ in 0..50 {
            let q = random_basis(&mut rng, cols, k);
            let proj = a.matmul(&q)?.matmul_t(&q)?;
            let err = frob(&a.sub(&proj)?);
            ensure!(best <= err + 1e-12 * frob(&a), "rank-{k} truncation {best} beaten by {err}");
            ey_checks += 1;
        }
    }
    ensure!(worst_rec <= 1e-8, "reconstruction error {worst_rec:e}");
    ensure!(worst_orth <= 1e-9, "orthogonality residual {worst_orth:e}");
    Ok(format!(
        "reconstruction {worst_rec:.1e}, orthogonality {worst_orth:.1e}, {ey_checks} random projections all worse"
    ))
}

// ---------------------------------------------------------------- 3

fn randomize(model: &mut AdaptedLinear, rng: &mut Rng) {
    for p in model.params_mut() {
        if p.trainable {
            let (r, c) = p.value.shape();
            p.value = rng.uniform_matrix(r, c, 1.0);
        }
    }
}

fn gradient_check() -> Result<String> {
    let configs: [(&str, fn(&mut Rng, &Matrix) -> sara::Result<Adapter>); 5] = [
        ("sara", |r, w| Ok(Adapter::Sara(SaraAdapter::init(r, w, 0.8, InitMode::Random)?))),
        ("lora", |r, w| Ok(Adapter::Lora(LoraAdapter::init(r, w, 2, 1.5)?))),
        ("mosara/after", |r, w| Ok(Adapter::MoSara(MoSaraAdapter::init(r, w, 0.8, 3, VMode::After)?))),
        ("mosara/front", |r, w| Ok(Adapter::MoSara(MoSaraAdapter::init(r, w, 0.8, 3, VMode::Front)?))),
        ("mosara/off", |r, w| Ok(Adapter::MoSara(MoSaraAdapter::init(r, w, 0.8, 2, VMode::Off)?))),
    ];
    let eps = 1e-6;
    let (mut worst, mut tensors) = (0.0f64, BTreeMap::new());
    for (name, make) in configs {
        for seed in 0..10 {
            let mut rng = Rng::new(300 + seed);
            let w = rng.uniform_matrix(5, 4, 1.0);
            let adapter = make(&mut rng, &w)?;
            let mut model = AdaptedLinear::new(w, adapter);
            randomize(&mut model, &mut rng);
            let ex = Regression {
                x: rng.uniform_matrix(3, 5, 1.0),
                y: rng.uniform_matrix(3, 4, 1.0),
            };
            let (_, grads) = model.loss_and_grads(&ex, None)?;
            let names: Vec<(String, bool)> =
                model.named_params().into_iter().map(|(n, p)| (n, p.trainable)).collect();
            for (i, (pname, trainable)) in names.iter().enumerate() {
                if !trainable {
                    continue;
                }
                let n = grads[i].len();
                let mut fd = vec![0.0; n];
                for (j, slot) in fd.iter_mut().enumerate() {
                    let at = |delta: f64| -> Result<f64> {
                        let mut m = model.clone();
                        m.params_mut()[i].value.data_mut()[j] += delta;
                        Ok(m.loss_and_grads(&ex, None)?.0)
                    };
                    *slot = (at(eps)? - at(-eps)?) / (2.0 * eps);
                }
                let diff: f64 = grads[i].data().iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let scale = frob(&grads[i]).max(fd.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
                let rel = diff / scale;
                worst = worst.max(rel);
                ensure!(rel <= 1e-4, "{name} {pname} seed {seed}: relative error {rel:e}");
                *tensors.entry(format!("{name}:{pname}")).or_insert(0) += 1;
            }
        }
    }
    ensure!(tensors.values().all(|&c| c == 10), "uneven instance counts {tensors:?}");
    Ok(format!("{} tensors x 10 instances, worst relative error {worst:.1e}", tensors.len()))
}

// ---------------------------------------------------------------- 4

fn merge_equivalence() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let d = dir.path();
    common::small_base(d, 30);
    let configs: [(&str, &[&str]); 6] = [
        ("sara-random", &["--method", "sara"]),
        ("sara-vzero", &["--method", "sara", "--init-mode", "v-zero"]),
        ("sara-svd", &["--method", "sara", "--init-mode", "svd-seeded", "--threshold", "0.4"]),
        ("sara-nolambda", &["--method", "sara", "--no-lambda", "--kinds", "Q,K,V,O"]),
        ("lora-r2", &["--method", "lora"]),
        ("lora-r4", &["--method", "lora", "--rank", "4", "--scaling", "0.5", "--layers", "1..1"]),
    ];
    let mut worst = 0.0f64;
    for (name, flags) in configs {
        let mut args = vec!["finetune", "--base", "base.stc", "--steps", "10", "--out", name];
        args.extend(flags);
        sara_ok(&args, d);
        let merged = format!("{name}.stc");
        let adapter = format!("{name}/adapter.stc");
        sara_ok(&["merge", "--base", "base.stc", "--adapter", &adapter, "--out", &merged], d);
        let eval = |model: &str, logits: &str| -> Result<Value> {
            let out = sara_ok(&["eval", "--model", model, "--task", "lang-b", "--size", "20", "--logits", logits], d);
            Ok(serde_json::from_str(&out)?)
        };
        let via_adapter = eval(name, "a.csv")?;
        let via_merge = eval(&merged, "m.csv")?;
        let (a, m) = (read_logits(&d.join("a.csv")), read_logits(&d.join("m.csv")));
        ensure!(a.len() == m.len() && !a.is_empty(), "{name}: logit counts differ");
        let diff = a.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure!(diff <= 1e-10, "{name}: max abs logit difference {diff:e}");
        ensure!(via_adapter["accuracy"] == via_merge["accuracy"], "{name}: accuracies differ");
        let dl = (via_adapter["loss"].as_f64().unwrap() - via_merge["loss"].as_f64().unwrap()).abs();
        ensure!(dl <= 1e-10, "{name}: losses differ by {dl:e}");
        worst = worst.max(diff);
    }
    Ok(format!("{} configs x 20 inputs via merge + eval, max abs difference {worst:.1e}", configs.len()))
}

// ---------------------------------------------------------------- 5

fn noop_at_init() -> Result<String> {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for seed in 0..3u64 {
        let mc = TinyTransformerConfig::default();
        let base = sara::model::build_model(&mc, &Rng::new(seed))?;
        let mut rng = Rng::new(seed + 100);
        let batch: Vec<Vec<usize>> = (0..8)
            .map(|_| (0..1 + rng.below(mc.max_len)).map(|_| rng.below(mc.vocab)).collect())
            .collect();
        let variants: [(Method, fn(&mut TrainConfig)); 5] = [
            (Method::Mosara, |c| c.v_mode = VMode::After),
            (Method::Mosara, |c| c.v_mode = VMode::Front),
            (Method::Lora, |_| {}),
            (Method::Sara, |c| c.init_mode = InitMode::VZero),
            (Method::Mosara, |c| c.heads = 1),
        ];
        for (method, tweak) in variants {
            let mut c = default_config(method, "desk")?;
            c.kinds = ["Q", "K", "V", "O"].map(String::from).to_vec();
            c.seed = seed;
            tweak(&mut c);
            let mut m = base.clone();
            ensure!(attach_adapters(&mut m, &c)? == 4 * mc.layers, "not every projection adapted");
            for tokens in &batch {
                let diff = m.forward(tokens)?.max_abs_diff(&base.forward(tokens)?)?;
                worst = worst.max(diff);
            }
            runs += 1;
        }
    }
    ensure!(worst <= 1e-9, "max abs logit difference {worst:e}");
    Ok(format!("{runs} adapted models x 8 sequences, max abs logit difference {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn trainable(model: &AdaptedLinear) -> usize {
    model.named_params().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.numel()).sum()
}

fn param_counts() -> Result<String> {
    let mut rng = Rng::new(6);
    let dims = [3, 8, 17, 32, 64];
    let mut checked = 0;
    for &d_in in &dims {
        for &d_out in &dims {
            let w = rng.uniform_matrix(d_in, d_out, 1.0);
            for t in [0.2, 0.5, 0.9] {
                let k = k_from_weight(&w, t)?;
                let s = AdaptedLinear::new(w.clone(), Adapter::Sara(SaraAdapter::init(&mut rng, &w, t, InitMode::Random)?));
                ensure!(trainable(&s) == k * (d_in + d_out + 1), "sara {d_in}x{d_out} t={t}");
                ensure!(s.adapter.param_count() == trainable(&s), "sara reported count");
                for m in [1, 3, 5] {
                    let a = MoSaraAdapter::init(&mut rng, &w, t, m, VMode::After)?;
                    let mo = AdaptedLinear::new(w.clone(), Adapter::MoSara(a));
                    ensure!(trainable(&mo) == m * k + k + m + d_out, "mosara {d_in}x{d_out} t={t} m={m}");
                    ensure!(mo.adapter.param_count() == trainable(&mo), "mosara reported count");
                    checked += 2;
                }
                checked += 1;
            }
            for r in [1, 4] {
                let l = AdaptedLinear::new(w.clone(), Adapter::Lora(LoraAdapter::init(&mut rng, &w, r, 1.0)?));
                ensure!(trainable(&l) == r * (d_in + d_out), "lora {d_in}x{d_out} r={r}");
                ensure!(l.adapter.param_count() == trainable(&l), "lora reported count");
                checked += 1;
            }
        }
    }
    // A 64x64 weight whose spectrum puts 90% of the mass in 8 directions.
    let spectrum: Vec<f64> = (0..64).map(|i| if i < 8 { 10.0 } else { 0.01 }).collect();
    let w = Matrix::from_diag(&spectrum);
    ensure!(k_from_weight(&w, 0.9)? == 8, "designed spectrum does not give k=8");
    let sara_n = Adapter::Sara(SaraAdapter::init(&mut rng, &w, 0.9, InitMode::Random)?).param_count();
    let mo_n = Adapter::MoSara(MoSaraAdapter::init(&mut rng, &w, 0.9, 5, VMode::After)?).param_count();
    ensure!((sara_n, mo_n) == (1032, 117), "got sara {sara_n}, mosara {mo_n}");
    let ratio = sara_n as f64 / mo_n as f64;
    ensure!(ratio >= 5.0, "ratio {ratio}");
    Ok(format!("{checked} shape cases match; d=64 k=8 m=5: {sara_n} vs {mo_n} ({ratio:.1}x)"))
}

// ---------------------------------------------------------------- shared desk setup

struct Desk {
    base: TinyTransformer,
    accuracy: f64,
    elapsed: Duration,
}

fn lang(kind: TaskKind, seed: u64, label: &str, size: usize) -> Result<Vec<Example>> {
    Ok(gen_task(&TaskSpec::new(kind, 16, Rng::new(seed).split(label).seed(), size))?)
}

fn desk() -> Result<Desk> {
    let t = Instant::now();
    let config = default_config(Method::Full, "desk")?;
    let train = lang(TaskKind::LangA, config.seed, "data", 1024)?;
    let eval = lang(TaskKind::LangA, config.seed, "eval", 256)?;
    let (base, _) = pretrain(&TinyTransformerConfig::default(), &train, &config, Exec::default())?;
    let accuracy = evaluate(&base, &eval)?.accuracy;
    Ok(Desk {
        base,
        accuracy,
        elapsed: t.elapsed(),
    })
}

fn cached<'a>(cell: &'a OnceCell<Desk>) -> Result<&'a Desk> {
    if cell.get().is_none() {
        let _ = cell.set(desk()?);
    }
    Ok(cell.get().expect("just set"))
}

// ---------------------------------------------------------------- 7

fn monotone_sweep(cell: &OnceCell<Desk>) -> Result<String> {
    let desk = cached(cell)?;
    let config = default_config(Method::Mosara, "desk")?;
    let exp = Experiment::new(
        desk.base.clone(),
        lang(TaskKind::LangB, 7, "data", 512)?,
        lang(TaskKind::LangB, 7, "eval", 256)?,
        config.clone(),
    )?;
    let thresholds = [0.1, 0.3, 0.5, 0.7];
    let report = threshold_sweep(&exp, &thresholds, Exec::default())?;
    let profile = rank_profile(&desk.base.to_checkpoint()?, &["Q", "V"], &thresholds)?;
    let d = desk.base.d_model();
    let (mut ks, mut params) = (Vec::new(), Vec::new());
    for (row, &t) in report.rows.iter().zip(&thresholds) {
        ensure!(row.setting == t, "row order {} vs {t}", row.setting);
        let per: Vec<usize> = profile.entries.iter().filter(|e| e.threshold == t).map(|e| e.k).collect();
        let closed: usize = per.iter().map(|k| config.heads * k + k + config.heads + d).sum();
        ensure!(row.params == closed, "t={t}: {} params, closed form {closed}", row.params);
        ks.push(per.iter().sum::<usize>());
        params.push(row.params);
    }
    ensure!(ks.windows(2).all(|w| w[0] <= w[1]), "k not monotone: {ks:?}");
    ensure!(params.windows(2).all(|w| w[0] <= w[1]), "params not monotone: {params:?}");
    Ok(format!("total k {ks:?}, trainable {params:?}"))
}

// ---------------------------------------------------------------- 8

fn desk_efficacy(cell: &OnceCell<Desk>) -> Result<String> {
    let desk = cached(cell)?;
    ensure!(desk.accuracy >= 0.9, "pretrain accuracy {:.3}", desk.accuracy);
    let mut wins = BTreeMap::from([("sara", 0), ("mosara", 0)]);
    let mut worst = BTreeMap::from([("sara", f64::INFINITY), ("mosara", f64::INFINITY)]);
    let mut max_fraction = 0.0f64;
    for seed in 0..10u64 {
        let data = lang(TaskKind::LangB, seed, "data", 512)?;
        let run = |method: Method| -> Result<(f64, TinyTransformer)> {
            let c = TrainConfig {
                seed,
                ..default_config(method, "desk")?
            };
            let (m, log) = finetune(&desk.base, &data, &c, Exec::default())?;
            Ok((log.tail_loss(10).context("empty log")?, m))
        };
        let (frozen, _) = run(Method::Frozen)?;
        for (name, method) in [("sara", Method::Sara), ("mosara", Method::Mosara)] {
            let (loss, model) = run(method)?;
            if method == Method::Sara {
                max_fraction = max_fraction.max(model.trainable_fraction());
            }
            if method == Method::Mosara {
                ensure!(heads_of(&model) == 5, "mosara runs with {} heads", heads_of(&model));
            }
            let rel = (frozen - loss) / frozen;
            *worst.get_mut(name).unwrap() = worst[name].min(rel);
            if rel >= 0.2 {
                *wins.get_mut(name).unwrap() += 1;
            }
        }
    }
    ensure!(max_fraction <= 0.05, "sara trainable fraction {max_fraction:.4}");
    ensure!(wins.values().all(|&w| w >= 9), "successes {wins:?}");
    Ok(format!(
        "pretrain accuracy {:.3} ({:.0} s); sara {}/10 (min reduction {:.2}, fraction {:.3}), mosara {}/10 (min reduction {:.2})",
        desk.accuracy,
        desk.elapsed.as_secs_f64(),
        wins["sara"],
        worst["sara"],
        max_fraction,
        wins["mosara"],
        worst["mosara"]
    ))
}

fn heads_of(model: &TinyTransformer) -> usize {
    model
        .adapters()
        .iter()
        .filter_map(|(_, _, a)| a.as_mosara())
        .map(|a| a.heads())
        .min()
        .unwrap_or(0)
}

// ---------------------------------------------------------------- 9

fn routing_contract(cell: &OnceCell<Desk>) -> Result<String> {
    let desk = cached(cell)?;
    let config = TrainConfig {
        total_steps: 60,
        ..default_config(Method::Mosara, "desk")?
    };
    let (model, _) = finetune(&desk.base, &lang(TaskKind::LangB, 9, "data", 256)?, &config, Exec::default())?;
    let probe = probe_batch(&[
        TaskSpec::new(TaskKind::LangA, 12, 1, 1),
        TaskSpec::new(TaskKind::LangB, 12, 2, 1),
        TaskSpec::new(TaskKind::Copy, 6, 3, 1),
    ]);
    let mut rows = 0;
    for kind in [ProjKind::Q, ProjKind::V] {
        let heatmap = routing_heatmap(&model, &probe, kind)?;
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for line in heatmap.to_csv().lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            *sums.entry(f[0].to_string()).or_default() += f[2].parse::<f64>()?;
        }
        for (layer, s) in &sums {
            ensure!((s - 1.0).abs() <= 1e-6, "{kind:?} layer {layer} sums to {s}");
        }
        rows += sums.len();

        let mut zeroed = model.clone();
        for b in &mut zeroed.blocks {
            if let Some(Adapter::MoSara(a)) = &mut b.adapters[kind.index()] {
                a.wg1.value = Matrix::zeros(a.wg1.value.rows(), a.wg1.value.cols());
            }
        }
        let flat = routing_heatmap(&zeroed, &probe, kind)?;
        let m = flat.values.cols() as f64;
        let off = flat.values.data().iter().map(|v| (v - 1.0 / m).abs()).fold(0.0, f64::max);
        ensure!(off <= 1e-12, "{kind:?} zeroed gate off uniform by {off:e}");

        let bytes = model.adapter_checkpoint()?.to_bytes();
        let mut restored = desk.base.clone();
        restored.load_adapters(&Checkpoint::from_bytes(&bytes)?)?;
        let again = routing_heatmap(&restored, &probe, kind)?;
        ensure!(again.values == heatmap.values, "{kind:?} regenerated heatmap differs");
        ensure!(again.to_csv() == heatmap.to_csv() && again.to_pgm() == heatmap.to_pgm(), "{kind:?} exports differ");
    }
    Ok(format!("{rows} exported rows sum to 1, zeroed gates uniform, reload bit-identical"))
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p)? {
            let path = e?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir)?.display().to_string();
                out.insert(key, fs::read(&path)?);
            }
        }
    }
    Ok(out)
}

fn cli_session(d: &Path) -> Result<Vec<String>> {
    let runs: Vec<Vec<&str>> = vec![
        vec!["pretrain", "--out", "base.stc", "--log", "pre.csv", "--steps", "40", "--size", "256", "--seed", "7"],
        vec!["analyze-ranks", "--checkpoint", "base.stc", "--out", "ranks.csv"],
        vec!["finetune", "--base", "base.stc", "--method", "sara", "--seed", "42", "--steps", "20", "--dropout", "0.1", "--out", "sara"],
        vec!["finetune", "--base", "base.stc", "--method", "mosara", "--seed", "42", "--steps", "20", "--dropout", "0.1", "--out", "mosara"],
        vec!["finetune", "--base", "base.stc", "--method", "lora", "--seed", "42", "--steps", "20", "--out", "lora"],
        vec!["finetune", "--base", "base.stc", "--method", "full", "--seed", "42", "--steps", "10", "--out", "full"],
        vec!["merge", "--base", "base.stc", "--adapter", "sara/adapter.stc", "--out", "merged.stc"],
        vec!["routing", "--model", "mosara", "--out", "heat.csv,heat.pgm"],
        vec!["sweep", "--kind", "threshold", "--values", "0.2,0.5", "--base", "base.stc", "--steps", "8", "--size", "64", "--jobs", "2", "--out", "sweep.csv"],
        vec!["eval", "--model", "merged.stc", "--task", "lang-b", "--size", "16", "--logits", "logits.csv"],
    ];
    runs.iter().map(|a| Ok(sara_ok(a, d))).collect()
}

fn determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let first_out = cli_session(dir.path())?;
    let first = snapshot(dir.path())?;
    for name in first.keys() {
        fs::remove_file(dir.path().join(name))?;
    }
    let second_out = cli_session(dir.path())?;
    let second = snapshot(dir.path())?;
    ensure!(first.keys().eq(second.keys()), "different file sets");
    for (name, bytes) in &first {
        ensure!(second[name] == *bytes, "{name} differs between runs");
    }
    ensure!(first_out == second_out, "stdout differs between runs");
    Ok(format!("{} files and {} stdout streams byte-identical", first.len(), first_out.len()))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let cell = OnceCell::new();
    let criteria: Vec<(&str, u64, Box<dyn Fn() -> Result<String> + '_>)> = vec![
        ("rank selection matches brute-force oracle", 10, Box::new(rank_oracle)),
        ("svd reconstruction, orthogonality, optimality", 60, Box::new(svd_quality)),
        ("adapter gradients match finite differences", 30, Box::new(gradient_check)),
        ("merge equivalence through the CLI", 10, Box::new(merge_equivalence)),
        ("adapters are no-ops at init", 5, Box::new(noop_at_init)),
        ("parameter count closed forms", 1, Box::new(param_counts)),
        ("threshold sweep is monotone", 300, Box::new(|| monotone_sweep(&cell))),
        ("desk-scale fine-tuning beats frozen", 900, Box::new(|| desk_efficacy(&cell))),
        ("routing heatmap contract", 5, Box::new(|| routing_contract(&cell))),
        ("CLI runs are byte-identical", 60, Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        let verdict = match result {
            Ok(detail) if secs <= *budget as f64 => format!("PASS  {:>2} {name}: {detail} ({secs:.1} s)", i + 1),
            Ok(detail) => format!("FAIL  {:>2} {name}: {detail}, but took {secs:.1} s of {budget} s", i + 1),
            Err(e) => format!("FAIL  {:>2} {name}: {e:#} ({secs:.1} s)", i + 1),
        };
        if verdict.starts_with("FAIL") {
            failed += 1;
        }
        println!("{verdict}");
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
