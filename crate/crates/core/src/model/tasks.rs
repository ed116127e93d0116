//! Synthetic token tasks. Every example is a pure function of
//! `(kind, seed, index)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Rng;

/// Probability that a language sequence jumps to a uniformly random token
/// instead of following its successor map.
pub const LANG_NOISE: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
    LangA,
    LangB,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular_add",
            TaskKind::LangA => "lang_a",
            TaskKind::LangB => "lang_b",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modular_add" | "modular-add" => Ok(TaskKind::ModularAdd),
            "lang_a" | "lang-a" => Ok(TaskKind::LangA),
            "lang_b" | "lang-b" => Ok(TaskKind::LangB),
            _ => Err(Error::invalid(format!(
                "unknown task `{s}` (copy, reverse, modular_add, lang_a, lang_b)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Sequence length (input length for copy/reverse, total length for the
    /// languages; ignored by modular_add).
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Alphabet size; also the modulus of modular_add.
    #[serde(default = "default_vocab")]
    pub vocab: usize,
}

fn default_length() -> usize {
    12
}
fn default_size() -> usize {
    512
}
fn default_vocab() -> usize {
    16
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, seed: u64, size: usize) -> Self {
        TaskSpec {
            kind,
            length,
            seed,
            size,
            vocab: default_vocab(),
        }
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    /// Longest token sequence the model is fed for this task.
    pub fn context_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => 2 * self.length - 1,
            TaskKind::ModularAdd => 2,
            TaskKind::LangA | TaskKind::LangB => self.length - 1,
        }
    }
}

/// Prompt tokens and the tokens the model must produce after them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl Example {
    /// The teacher-forced token stream `input ++ target[..n-1]` and, for each
    /// position, the token it must predict (only target positions carry one).
    pub fn sequence(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut tokens = self.input.clone();
        tokens.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        let start = self.input.len() - 1;
        let labels = (0..tokens.len())
            .map(|p| p.checked_sub(start).map(|j| self.target[j]))
            .collect();
        (tokens, labels)
    }
}

pub fn modular_add(a: usize, b: usize, modulus: usize) -> usize {
    (a + b) % modulus
}

/// Successor map of a synthetic language. `lang_b` differs from `lang_a` at
/// every token.
pub fn successor_map(kind: TaskKind, vocab: usize) -> Vec<usize> {
    let mut sigma: Vec<usize> = (0..vocab).collect();
    Rng::new(0x5a5a_1a2b).split("lang_a").shuffle(&mut sigma);
    match kind {
        TaskKind::LangB => (0..vocab).map(|c| sigma[(c + 1) % vocab]).collect(),
        _ => sigma,
    }
}

pub fn gen_example(spec: &TaskSpec, index: usize) -> Example {
    let mut rng = Rng::new(spec.seed)
        .split(spec.kind.as_str())
        .split_index(index as u64);
    let v = spec.vocab;
    match spec.kind {
        TaskKind::Copy | TaskKind::Reverse => {
            let input: Vec<usize> = (0..spec.length).map(|_| rng.below(v)).collect();
            let mut target = input.clone();
            if spec.kind == TaskKind::Reverse {
                target.reverse();
            }
            Example { input, target }
        }
        TaskKind::ModularAdd => {
            let (a, b) = (rng.below(v), rng.below(v));
            Example {
                input: vec![a, b],
                target: vec![modular_add(a, b, v)],
            }
        }
        TaskKind::LangA | TaskKind::LangB => {
            let sigma = successor_map(spec.kind, v);
            let mut seq = vec![rng.below(v)];
            while seq.len() < spec.length {
                let prev = *seq.last().expect("non-empty");
                let next = if rng.bernoulli(LANG_NOISE) {
                    rng.below(v)
                } else {
                    sigma[prev]
                };
                seq.push(next);
            }
            Example {
                input: seq[..1].to_vec(),
                target: seq[1..].to_vec(),
            }
        }
    }
}

pub fn gen_task(spec: &TaskSpec) -> Result<Vec<Example>> {
    let min_len = match spec.kind {
        TaskKind::ModularAdd => 0,
        TaskKind::LangA | TaskKind::LangB => 2,
        _ => 1,
    };
    if spec.length < min_len || spec.vocab < 2 {
        return Err(Error::invalid(format!(
            "task {} needs length >= {min_len} and vocab >= 2",
            spec.kind.as_str()
        )));
    }
    Ok((0..spec.size).map(|i| gen_example(spec, i)).collect())
}

/// Token CSV: `index,input,target` with space-separated tokens.
pub fn dataset_to_csv(data: &[Example]) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut out = String::from("index,input,target\n");
    for (i, ex) in data.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", join(&ex.input), join(&ex.target)));
    }
    out
}
