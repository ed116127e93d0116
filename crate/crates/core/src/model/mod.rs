//! Tiny decoder-only transformer testbed, synthetic tasks, and evaluation.

mod tasks;
mod transformer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use tasks::{
    dataset_to_csv, gen_example, gen_task, modular_add, successor_map, Example, TaskKind, TaskSpec, LANG_NOISE,
};
pub use transformer::{build_model, Block, ForwardCache, LayerNorm, ProjKind, TinyTransformer, TinyTransformerConfig};

use crate::adapters::{Adapter, AdapterDescriptor, LoraAdapter, MoSaraAdapter, SaraAdapter};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::par::Exec;
use crate::train::{Dropout, Method, Param, TrainConfig, Trainable};

use transformer::adapter_prefix;

pub const META_MODEL: &str = "model";
pub const META_ADAPTERS: &str = "adapters";
pub const META_VERSION: &str = "format_version";

/// Anything that maps a token sequence to per-position logits.
pub trait SequenceModel: Sync {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix>;
}

impl SequenceModel for TinyTransformer {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        self.forward(tokens)
    }
}

/// Mean cross-entropy over labeled positions, its gradient with respect to
/// the logits, and the number of labeled positions whose argmax is correct.
pub fn token_loss(logits: &Matrix, labels: &[Option<usize>]) -> Result<(f64, Matrix, usize)> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} labels for {} positions",
            labels.len(),
            logits.rows()
        )));
    }
    let n = labels.iter().flatten().count();
    if n == 0 {
        return Err(Error::invalid("example has no labeled positions"));
    }
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    let (mut loss, mut correct) = (0.0, 0);
    for (i, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        if y >= logits.cols() {
            return Err(Error::invalid(format!("label {y} outside vocab {}", logits.cols())));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += max + sum.ln() - row[y];
        if argmax(row) == y {
            correct += 1;
        }
        for (j, g) in d.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum;
            *g = (p - f64::from(u8::from(j == y))) / n as f64;
        }
    }
    Ok((loss / n as f64, d, correct))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Trainable for TinyTransformer {
    type Example = Example;

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = self.base_params();
        out.extend(self.adapter_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.all_params_mut()
    }

    fn loss_and_grads(&self, example: &Example, dropout: Option<Dropout>) -> Result<(f64, Vec<Matrix>)> {
        let (tokens, labels) = example.sequence();
        let (logits, cache) = self.forward_train(&tokens, dropout)?;
        let (loss, dlogits, _) = token_loss(&logits, &labels)?;
        Ok((loss, self.backward(&cache, &dlogits)?))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Greedy next-token accuracy over target positions.
    pub accuracy: f64,
    /// Mean cross-entropy per target token.
    pub loss: f64,
    pub tokens: usize,
}

pub fn evaluate(model: &impl SequenceModel, data: &[Example]) -> Result<Metrics> {
    evaluate_with(model, data, Exec::default())
}

/// Teacher-forced evaluation. Per-example work runs under `exec`, sums are
/// taken in dataset order.
pub fn evaluate_with(model: &impl SequenceModel, data: &[Example], exec: Exec) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation data is empty"));
    }
    let per = exec.map(data.len(), |i| {
        let (tokens, labels) = data[i].sequence();
        let logits = model.logits(&tokens)?;
        let (loss, _, correct) = token_loss(&logits, &labels)?;
        let n = labels.iter().flatten().count();
        Ok::<_, Error>((loss * n as f64, correct, n))
    });
    let (mut loss, mut correct, mut tokens) = (0.0, 0, 0);
    for r in per {
        let (l, c, n) = r?;
        loss += l;
        correct += c;
        tokens += n;
    }
    Ok(Metrics {
        accuracy: correct as f64 / tokens as f64,
        loss: loss / tokens as f64,
        tokens,
    })
}

pub fn parse_kinds(kinds: &[String]) -> Result<Vec<ProjKind>> {
    let set: BTreeSet<ProjKind> = kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?;
    if set.is_empty() {
        return Err(Error::invalid("no adapter targets given"));
    }
    Ok(set.into_iter().collect())
}

/// Prepares `model` for `config.method`: adapters on the configured
/// projections and layer range with the base frozen (lora, sara, mosara),
/// everything trainable (full), or nothing trainable (frozen). Returns the
/// number of adapters attached.
pub fn attach_adapters(model: &mut TinyTransformer, config: &TrainConfig) -> Result<usize> {
    for b in &mut model.blocks {
        b.adapters = [None, None, None, None];
    }
    match config.method {
        Method::Full => {
            model.set_base_trainable(true);
            return Ok(0);
        }
        Method::Frozen => {
            model.set_base_trainable(false);
            return Ok(0);
        }
        _ => {}
    }
    let kinds = parse_kinds(&config.kinds)?;
    let layers = model.layers();
    let (lo, hi) = config.layers.unwrap_or((0, layers - 1));
    if lo > hi || hi >= layers {
        return Err(Error::invalid(format!(
            "layer range {lo}..{hi} outside the model's {layers} layers"
        )));
    }
    model.set_base_trainable(false);
    let root = Rng::new(config.seed).split("adapters");
    let mut count = 0;
    for l in lo..=hi {
        for &kind in &kinds {
            let mut rng = root.split(&adapter_prefix(l, kind));
            let w = &model.blocks[l].proj[kind.index()].value;
            let adapter = match config.method {
                Method::Lora => Adapter::Lora(LoraAdapter::init(&mut rng, w, config.lora_rank, config.lora_scaling)?),
                Method::Sara => {
                    let s = SaraAdapter::init(&mut rng, w, config.threshold, config.init_mode)?;
                    Adapter::Sara(if config.use_lambda { s } else { s.without_lambda() })
                }
                Method::Mosara => Adapter::MoSara(MoSaraAdapter::init(
                    &mut rng,
                    w,
                    config.threshold,
                    config.heads,
                    config.v_mode,
                )?),
                Method::Full | Method::Frozen => unreachable!(),
            };
            model.blocks[l].adapters[kind.index()] = Some(adapter);
            count += 1;
        }
    }
    Ok(count)
}

/// Where an adapter sits, stored in checkpoint meta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub layer: usize,
    pub kind: ProjKind,
    #[serde(flatten)]
    pub descriptor: AdapterDescriptor,
}

fn insert_param(ckpt: &mut Checkpoint, name: String, p: &Param) -> Result<()> {
    if p.vector {
        ckpt.insert_vector(name, p.values())
    } else {
        ckpt.insert_matrix(name, &p.value)
    }
}

impl TinyTransformer {
    fn write_adapters(&self, ckpt: &mut Checkpoint) -> Result<()> {
        let mut records = Vec::new();
        for (layer, kind, a) in self.adapters() {
            a.save(ckpt, &adapter_prefix(layer, kind))?;
            records.push(AdapterRecord {
                layer,
                kind,
                descriptor: a.descriptor(),
            });
        }
        if !records.is_empty() {
            ckpt.meta.insert(META_ADAPTERS.into(), serde_json::to_string(&records)?);
        }
        Ok(())
    }

    fn stamp(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.meta.insert(META_MODEL.into(), serde_json::to_string(&self.config)?);
        ckpt.meta.insert(META_VERSION.into(), FORMAT_VERSION.into());
        Ok(())
    }

    /// Base weights plus any attached adapters.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for (name, p) in self.base_params() {
            insert_param(&mut ckpt, name, p)?;
        }
        self.write_adapters(&mut ckpt)?;
        self.stamp(&mut ckpt)?;
        Ok(ckpt)
    }

    /// Adapters only; pair with the base checkpoint to restore the model.
    pub fn adapter_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        self.write_adapters(&mut ckpt)?;
        self.stamp(&mut ckpt)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<TinyTransformer> {
        let raw = ckpt
            .meta
            .get(META_MODEL)
            .ok_or_else(|| Error::Malformed("checkpoint has no model config".into()))?;
        let config: TinyTransformerConfig = serde_json::from_str(raw)?;
        let mut model = build_model(&config, &Rng::new(0))?;
        let names: Vec<String> = model.base_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(model.base_params_mut()) {
            let value = ckpt.matrix(name)?;
            if value.shape() != p.value.shape() {
                return Err(Error::Malformed(format!(
                    "tensor `{name}` is {}x{}, expected {}x{}",
                    value.rows(),
                    value.cols(),
                    p.value.rows(),
                    p.value.cols()
                )));
            }
            p.value = value;
        }
        if ckpt.meta.contains_key(META_ADAPTERS) {
            model.load_adapters(ckpt)?;
        }
        Ok(model)
    }

    /// Attaches the adapters stored in `ckpt` and freezes the base.
    pub fn load_adapters(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let raw = ckpt
            .meta
            .get(META_ADAPTERS)
            .ok_or_else(|| Error::Malformed("checkpoint has no adapters".into()))?;
        let records: Vec<AdapterRecord> = serde_json::from_str(raw)?;
        let d = self.d_model();
        for r in records {
            if r.layer >= self.layers() {
                return Err(Error::Malformed(format!("adapter for missing layer {}", r.layer)));
            }
            let a = Adapter::load(ckpt, &adapter_prefix(r.layer, r.kind), &r.descriptor)?;
            if a.d_in() != d || a.d_out() != d {
                return Err(Error::Malformed(format!(
                    "adapter {} is {}x{}, model width is {d}",
                    adapter_prefix(r.layer, r.kind),
                    a.d_in(),
                    a.d_out()
                )));
            }
            self.blocks[r.layer].adapters[r.kind.index()] = Some(a);
        }
        self.set_base_trainable(false);
        Ok(())
    }

    /// Trainable entries over all entries, base plus adapters.
    pub fn trainable_fraction(&self) -> f64 {
        let all: usize = self.named_params().iter().map(|(_, p)| p.numel()).sum();
        self.trainable_count() as f64 / all as f64
    }
}
