use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sara::adapters::{InitMode, VMode};
use sara::analysis::{
    adapter_param_count, finetune, heads_sweep, layer_group_report, pretrain, probe_batch, routing_heatmap,
    scaling_sweep, threshold_sweep, Experiment,
};
use sara::checkpoint::Checkpoint;
use sara::model::{evaluate_with, gen_task, Example, SequenceModel, TaskKind, TaskSpec, TinyTransformer, TinyTransformerConfig};
use sara::par::{with_threads, Exec};
use sara::rank::rank_profile;
use sara::train::{default_config, Method, TrainConfig, Trainable};
use sara::Rng;

use crate::args::*;

pub const ADAPTER_FILE: &str = "adapter.stc";
pub const MODEL_FILE: &str = "model.stc";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.json";

const DEFAULT_LENGTH: usize = 16;
const DEFAULT_EVAL_SIZE: usize = 256;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::AnalyzeRanks(a) => analyze_ranks(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Merge(a) => merge(a),
        Command::Routing(a) => routing(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
    }
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lora => Method::Lora,
            MethodArg::Sara => Method::Sara,
            MethodArg::Mosara => Method::Mosara,
            MethodArg::Full => Method::Full,
            MethodArg::Frozen => Method::Frozen,
        }
    }
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Copy => TaskKind::Copy,
            TaskArg::Reverse => TaskKind::Reverse,
            TaskArg::ModularAdd => TaskKind::ModularAdd,
            TaskArg::LangA => TaskKind::LangA,
            TaskArg::LangB => TaskKind::LangB,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write_ckpt(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.write(path).with_context(|| format!("writing {}", path.display()))
}

fn analyze_ranks(a: AnalyzeRanks) -> Result<()> {
    let ckpt = read_ckpt(&a.checkpoint)?;
    let kinds: Vec<&str> = a.kinds.iter().map(String::as_str).collect();
    let profile = rank_profile(&ckpt, &kinds, &a.thresholds)?;
    emit(a.out.as_deref(), &profile.to_csv())
}

/// `--config` file contents.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<Value>,
    train: Option<Value>,
    task: Option<TaskFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    kind: Option<TaskKind>,
    length: Option<usize>,
    size: Option<usize>,
    eval_size: Option<usize>,
}

fn read_config_file(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Recipe, then config file, then flags.
fn train_config(method: Method, flags: &TrainFlags, file: &ConfigFile) -> Result<TrainConfig> {
    let mut c = default_config(method, &flags.recipe)?;
    if let Some(patch) = &file.train {
        c = c.overlay(patch)?;
        c.method = method;
    }
    if let Some(v) = flags.seed {
        c.seed = v;
    }
    if let Some(v) = flags.lr {
        c.lr = v;
    }
    if let Some(v) = flags.warmup {
        c.warmup_steps = v;
    }
    if let Some(v) = flags.steps {
        c.total_steps = v;
    }
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.dropout {
        c.dropout = v;
    }
    if let Some(v) = flags.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = flags.threshold {
        c.threshold = v;
    }
    if let Some(v) = flags.heads {
        c.heads = v;
    }
    if let Some(v) = flags.rank {
        c.lora_rank = v;
    }
    if let Some(v) = flags.scaling {
        c.lora_scaling = v;
    }
    if let Some(v) = flags.v_mode {
        c.v_mode = match v {
            VModeArg::After => VMode::After,
            VModeArg::Front => VMode::Front,
            VModeArg::Off => VMode::Off,
        };
    }
    if let Some(v) = flags.init_mode {
        c.init_mode = match v {
            InitModeArg::Random => InitMode::Random,
            InitModeArg::VZero => InitMode::VZero,
            InitModeArg::SvdSeeded => InitMode::SvdSeeded,
        };
    }
    if flags.no_lambda {
        c.use_lambda = false;
    }
    if let Some(v) = &flags.kinds {
        c.kinds = v.clone();
    }
    if flags.layers.is_some() {
        c.layers = flags.layers;
    }
    c.validate()?;
    Ok(c)
}

fn model_config(flags: &ModelFlags, file: &ConfigFile) -> Result<TinyTransformerConfig> {
    let mut c = TinyTransformerConfig::default();
    if let Some(patch) = &file.model {
        let mut merged = serde_json::to_value(&c)?;
        let (Some(obj), Some(p)) = (merged.as_object_mut(), patch.as_object()) else {
            bail!("`model` in the config file must be an object");
        };
        for (k, v) in p {
            if !obj.contains_key(k) {
                bail!("unknown model field `{k}`");
            }
            obj.insert(k.clone(), v.clone());
        }
        c = serde_json::from_value(merged)?;
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut c.layers, flags.n_layers);
    set(&mut c.d_model, flags.d_model);
    set(&mut c.heads, flags.n_heads);
    set(&mut c.vocab, flags.vocab);
    set(&mut c.max_len, flags.max_len);
    set(&mut c.ffn_mult, flags.ffn_mult);
    c.validate()?;
    Ok(c)
}

/// Training and held-out task specs, with data seeds split off the run seed.
fn task_specs(
    flags: &DataFlags,
    file: &ConfigFile,
    default_task: TaskKind,
    default_size: usize,
    model: &TinyTransformerConfig,
    seed: u64,
) -> Result<(TaskSpec, TaskSpec)> {
    let tf = file.task.as_ref();
    let kind = flags
        .task
        .map(TaskKind::from)
        .or(tf.and_then(|t| t.kind))
        .unwrap_or(default_task);
    let length = flags.length.or(tf.and_then(|t| t.length)).unwrap_or(DEFAULT_LENGTH);
    let size = flags.size.or(tf.and_then(|t| t.size)).unwrap_or(default_size);
    let eval_size = flags
        .eval_size
        .or(tf.and_then(|t| t.eval_size))
        .unwrap_or(DEFAULT_EVAL_SIZE);
    let root = Rng::new(seed);
    let train = TaskSpec::new(kind, length, root.split("data").seed(), size).with_vocab(model.vocab);
    let eval = TaskSpec::new(kind, length, root.split("eval").seed(), eval_size).with_vocab(model.vocab);
    check_fits(&train, model)?;
    Ok((train, eval))
}

fn check_fits(task: &TaskSpec, model: &TinyTransformerConfig) -> Result<()> {
    if task.context_len() > model.max_len {
        bail!(
            "task {} with length {} needs {} positions, model max_len is {}",
            task.kind.as_str(),
            task.length,
            task.context_len(),
            model.max_len
        );
    }
    Ok(())
}

fn data(spec: &TaskSpec) -> Result<Vec<Example>> {
    Ok(gen_task(spec)?)
}

fn pretrain_cmd(a: Pretrain) -> Result<()> {
    let file = read_config_file(a.train.config.as_deref())?;
    let model_cfg = model_config(&a.model, &file)?;
    let config = train_config(Method::Full, &a.train, &file)?;
    let (train_spec, eval_spec) = task_specs(&a.data, &file, TaskKind::LangA, 1024, &model_cfg, config.seed)?;
    let (train, eval) = (data(&train_spec)?, data(&eval_spec)?);
    let exec = Exec::default();
    let (model, log) = pretrain(&model_cfg, &train, &config, exec)?;
    let metrics = evaluate_with(&model, &eval, exec)?;
    write_ckpt(&model.to_checkpoint()?, &a.out)?;
    if let Some(p) = &a.log {
        fs::write(p, log.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "pretrain: {} steps on {}, eval accuracy {:.4}",
        log.rows.len(),
        train_spec.kind.as_str(),
        metrics.accuracy
    );
    let summary = json!({
        "params": model.trainable_count(),
        "steps": log.rows.len(),
        "final_loss": log.final_loss(),
        "eval": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Contents of `run/config.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub base: PathBuf,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub eval_task: TaskSpec,
}

fn load_model_file(path: &Path) -> Result<TinyTransformer> {
    let ckpt = read_ckpt(path)?;
    TinyTransformer::from_checkpoint(&ckpt).with_context(|| format!("loading model from {}", path.display()))
}

/// A checkpoint, or a run directory (its own model, or base plus adapters).
fn load_model(path: &Path) -> Result<TinyTransformer> {
    if !path.is_dir() {
        return load_model_file(path);
    }
    let own = path.join(MODEL_FILE);
    if own.exists() {
        return load_model_file(&own);
    }
    let cfg_path = path.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let run: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", cfg_path.display()))?;
    let mut model = load_model_file(&run.base)?;
    model.load_adapters(&read_ckpt(&path.join(ADAPTER_FILE))?)?;
    Ok(model)
}

struct Setup {
    base: TinyTransformer,
    base_path: PathBuf,
    config: TrainConfig,
    train_spec: TaskSpec,
    eval_spec: TaskSpec,
}

fn setup(base: &Path, method: Method, train: &TrainFlags, data_flags: &DataFlags) -> Result<Setup> {
    let file = read_config_file(train.config.as_deref())?;
    if file.model.is_some() {
        bail!("`model` in the config file only applies to pretrain");
    }
    let base_path = fs::canonicalize(base).with_context(|| format!("reading {}", base.display()))?;
    let base = load_model_file(&base_path)?;
    let config = train_config(method, train, &file)?;
    let (train_spec, eval_spec) = task_specs(data_flags, &file, TaskKind::LangB, 512, &base.config, config.seed)?;
    Ok(Setup {
        base,
        base_path,
        config,
        train_spec,
        eval_spec,
    })
}

fn finetune_cmd(a: Finetune) -> Result<()> {
    let s = setup(&a.base, a.method.into(), &a.train, &a.data)?;
    let (train, eval) = (data(&s.train_spec)?, data(&s.eval_spec)?);
    let exec = Exec::default();
    let (model, log) = finetune(&s.base, &train, &s.config, exec)?;
    let metrics = evaluate_with(&model, &eval, exec)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if s.config.method.uses_adapters() {
        write_ckpt(&model.adapter_checkpoint()?, &a.out.join(ADAPTER_FILE))?;
    } else {
        write_ckpt(&model.to_checkpoint()?, &a.out.join(MODEL_FILE))?;
    }
    fs::write(a.out.join(LOG_FILE), log.to_csv())?;
    let run = RunConfig {
        base: s.base_path,
        train: s.config.resolved(train.len()),
        task: s.train_spec,
        eval_task: s.eval_spec,
    };
    fs::write(a.out.join(CONFIG_FILE), serde_json::to_string_pretty(&run)? + "\n")?;

    eprintln!(
        "finetune: {} for {} steps, final loss {:.5}",
        run.train.method.as_str(),
        log.rows.len(),
        log.final_loss().unwrap_or(f64::NAN)
    );
    let summary = json!({
        "method": run.train.method.as_str(),
        "trainable": model.trainable_count(),
        "trainable_fraction": model.trainable_fraction(),
        "adapter_params": adapter_param_count(&model),
        "steps": log.rows.len(),
        "final_loss": log.final_loss(),
        "eval": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn merge(a: Merge) -> Result<()> {
    let mut model = load_model_file(&a.base)?;
    model.load_adapters(&read_ckpt(&a.adapter)?)?;
    let merged = model.merged()?;
    write_ckpt(&merged.to_checkpoint()?, &a.out)?;
    eprintln!("merge: folded {} adapters into {}", model.adapters().len(), a.out.display());
    Ok(())
}

fn routing(a: Routing) -> Result<()> {
    let model = load_model(&a.model)?;
    let kind = a.kind.parse()?;
    let specs: Vec<TaskSpec> = a
        .probe
        .iter()
        .map(|&t| TaskSpec::new(t.into(), a.length, 0, 1).with_vocab(model.config.vocab))
        .collect();
    for s in &specs {
        check_fits(s, &model.config)?;
    }
    let heatmap = routing_heatmap(&model, &probe_batch(&specs), kind)?;
    for p in &a.out {
        let is_pgm = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        let bytes = if is_pgm {
            heatmap.to_pgm()
        } else {
            heatmap.to_csv().into_bytes()
        };
        fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn sweep(a: Sweep) -> Result<()> {
    let method = a.method.map(Method::from).unwrap_or(match a.kind {
        SweepKind::Threshold | SweepKind::Heads => Method::Mosara,
        SweepKind::Scaling => Method::Lora,
        SweepKind::Layers => Method::Sara,
    });
    let s = setup(&a.base, method, &a.train, &a.data)?;
    let exp = Experiment::new(s.base, data(&s.train_spec)?, data(&s.eval_spec)?, s.config)?;
    let floats = || -> Result<Vec<f64>> {
        a.values
            .iter()
            .map(|v| v.trim().parse().with_context(|| format!("bad sweep value `{v}`")))
            .collect()
    };
    let exec = Exec::default();
    let (csv, variance) = match a.kind {
        SweepKind::Threshold => {
            let v = floats()?;
            (with_threads(a.jobs, || threshold_sweep(&exp, &v, exec))?.to_csv(), None)
        }
        SweepKind::Scaling => {
            let v = floats()?;
            (with_threads(a.jobs, || scaling_sweep(&exp, &v, exec))?.to_csv(), None)
        }
        SweepKind::Heads => {
            let v: Vec<usize> = a
                .values
                .iter()
                .map(|v| v.trim().parse().with_context(|| format!("bad head count `{v}`")))
                .collect::<Result<_>>()?;
            (with_threads(a.jobs, || heads_sweep(&exp, &v, exec))?.to_csv(), None)
        }
        SweepKind::Layers => {
            let groups: Vec<(usize, usize)> = a
                .values
                .iter()
                .map(|v| parse_range(v).map_err(anyhow::Error::msg))
                .collect::<Result<_>>()?;
            let r = with_threads(a.jobs, || layer_group_report(&exp, &groups, exec))?;
            (r.report.to_csv(), Some(r.variance))
        }
    };
    emit(a.out.as_deref(), &csv)?;
    if let Some(var) = variance {
        let names = sara::analysis::METRICS;
        let obj: serde_json::Map<String, Value> = names.iter().zip(var).map(|(n, v)| (n.to_string(), json!(v))).collect();
        let text = serde_json::to_string_pretty(&json!({ "variance": obj }))?;
        if a.out.is_some() {
            println!("{text}");
        } else {
            eprintln!("{text}");
        }
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let model = load_model(&a.model)?;
    let spec = TaskSpec::new(a.task.into(), a.length, Rng::new(a.seed).split("eval").seed(), a.size)
        .with_vocab(model.config.vocab);
    check_fits(&spec, &model.config)?;
    let examples = data(&spec)?;
    let metrics = evaluate_with(&model, &examples, Exec::default())?;
    if let Some(p) = &a.logits {
        let mut csv = String::from("example,position,token,value\n");
        for (i, ex) in examples.iter().enumerate() {
            let logits = model.logits(&ex.sequence().0)?;
            for r in 0..logits.rows() {
                for (t, v) in logits.row(r).iter().enumerate() {
                    writeln!(csv, "{i},{r},{t},{v:e}")?;
                }
            }
        }
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}
