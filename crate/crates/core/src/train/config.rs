use serde::{Deserialize, Serialize};

use crate::adapters::{InitMode, VMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Sara,
    Mosara,
    /// Every base weight trainable, no adapters.
    Full,
    /// Nothing trainable; the baseline.
    Frozen,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Sara => "sara",
            Method::Mosara => "mosara",
            Method::Full => "full",
            Method::Frozen => "frozen",
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, Method::Lora | Method::Sara | Method::Mosara)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "sara" => Ok(Method::Sara),
            "mosara" | "mo-sara" | "mo_sara" => Ok(Method::Mosara),
            "full" => Ok(Method::Full),
            "frozen" => Ok(Method::Frozen),
            _ => Err(Error::invalid(format!(
                "unknown method `{s}` (lora, sara, mosara, full, frozen)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    /// 0 means `epochs × ceil(examples / batch_size)`.
    pub total_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Applied to adapter inputs only.
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub method: Method,
    pub threshold: f64,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub v_mode: VMode,
    pub init_mode: InitMode,
    pub use_lambda: bool,
    /// Projections that receive adapters.
    pub kinds: Vec<String>,
    /// Inclusive layer range for adapters; all layers when absent.
    pub layers: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        default_config(Method::Mosara, "desk").expect("desk recipe exists")
    }
}

pub const RECIPES: [&str; 7] = [
    "math-7b",
    "math-13b",
    "gptj-6b",
    "commonsense-7b",
    "commonsense-13b",
    "e2e",
    "desk",
];

fn base(method: Method) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 100,
        total_steps: 0,
        batch_size: 16,
        epochs: 3,
        dropout: 0.05,
        weight_decay: 0.0,
        seed: 42,
        method,
        threshold: 0.5,
        heads: 5,
        lora_rank: 10,
        lora_scaling: 2.0,
        v_mode: VMode::After,
        init_mode: InitMode::Random,
        use_lambda: true,
        kinds: vec!["Q".into(), "V".into()],
        layers: None,
    }
}

/// Published hyperparameters per (method, recipe), plus a `desk` recipe
/// tuned for the toy transformer.
pub fn default_config(method: Method, recipe: &str) -> Result<TrainConfig> {
    let unknown = || Error::UnknownRecipe {
        method: method.as_str().to_string(),
        recipe: recipe.to_string(),
        known: RECIPES.join(", "),
    };
    let mut c = base(method);
    // (sara threshold, sara lr, mosara threshold, mosara heads, mosara lr)
    let table: Option<(f64, f64, f64, usize, f64)> = match recipe {
        "math-7b" => Some((0.01, 3e-3, 0.5, 5, 3e-2)),
        "math-13b" => Some((0.009, 1e-2, 0.5, 5, 3e-2)),
        "gptj-6b" => Some((0.009, 3e-3, 0.5, 5, 3e-2)),
        "commonsense-7b" => Some((0.09, 1e-3, 0.8, 5, 3e-2)),
        "commonsense-13b" => Some((0.075, 1e-3, 0.5, 5, 3e-2)),
        "e2e" => Some((0.012, 8e-3, 0.5, 3, 7e-2)),
        "desk" => None,
        _ => return Err(unknown()),
    };
    match table {
        Some((s_t, s_lr, m_t, m_h, m_lr)) => {
            match method {
                Method::Sara => {
                    c.threshold = s_t;
                    c.lr = s_lr;
                }
                Method::Mosara => {
                    c.threshold = m_t;
                    c.heads = m_h;
                    c.lr = m_lr;
                }
                Method::Lora if recipe.starts_with("math") || recipe == "gptj-6b" => c.lr = 3e-4,
                _ => return Err(unknown()),
            }
            if recipe == "e2e" {
                c.weight_decay = 0.01;
                c.warmup_steps = 500;
                c.epochs = 5;
                c.seed = 314;
            }
        }
        None => {
            c.warmup_steps = 20;
            c.epochs = 8;
            c.dropout = 0.0;
            match method {
                Method::Sara => {
                    c.threshold = 0.1;
                    c.lr = 1e-2;
                }
                Method::Mosara => {
                    c.threshold = 0.5;
                    c.lr = 3e-2;
                }
                Method::Lora => {
                    c.lora_rank = 2;
                    c.lr = 1e-2;
                }
                Method::Full => c.lr = 3e-3,
                Method::Frozen => c.lr = 1e-3,
            }
        }
    }
    Ok(c)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.total_steps == 0 && self.epochs == 0 {
            return fail("either total_steps or epochs must be positive".into());
        }
        if let Some((a, b)) = self.layers {
            if a > b {
                return fail(format!("empty layer range {a}..{b}"));
            }
        }
        match self.method {
            Method::Sara | Method::Mosara if !(self.threshold > 0.0 && self.threshold < 1.0) => {
                fail(format!("threshold {} outside (0, 1)", self.threshold))
            }
            Method::Mosara if self.heads == 0 => fail("mosara needs at least one head".into()),
            Method::Lora if self.lora_rank == 0 => fail("lora rank must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Replaces the fields present in a JSON object, keeping the rest.
    pub fn overlay(&self, patch: &serde_json::Value) -> Result<TrainConfig> {
        let serde_json::Value::Object(fields) = patch else {
            return Err(Error::invalid("train config must be a JSON object"));
        };
        let mut merged = serde_json::to_value(self)?;
        let target = merged.as_object_mut().expect("struct serializes to an object");
        for (k, v) in fields {
            if !target.contains_key(k) {
                return Err(Error::invalid(format!("unknown train config field `{k}`")));
            }
            target.insert(k.clone(), v.clone());
        }
        Ok(serde_json::from_value(merged)?)
    }

    /// `total_steps`, or the epoch-derived count when it is 0. Warmup is
    /// clamped so it never exceeds the total.
    pub fn resolved(&self, examples: usize) -> TrainConfig {
        let mut c = self.clone();
        if c.total_steps == 0 {
            c.total_steps = c.epochs * examples.div_ceil(c.batch_size).max(1);
        }
        c.warmup_steps = c.warmup_steps.min(c.total_steps);
        c
    }
}

/// Linear warmup from 0 to `lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let (w, t) = (config.warmup_steps as f64, config.total_steps as f64);
    let s = step as f64;
    if s < w {
        config.lr * s / w
    } else if s >= t {
        0.0
    } else {
        config.lr * (t - s) / (t - w)
    }
}
