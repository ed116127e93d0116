//! Adapters added in parallel to a frozen weight `W₀` (input `x` is l×d_in,
//! `W₀` is d_in×d_out, output `x·W₀ + branch(x)`):
//!
//! * [`LoraAdapter`]: `λ · x · A · B`, fixed rank `r` and fixed scaling `λ`.
//! * [`SaraAdapter`]: `x · U · diag(λ) · Vᵀ`, all trainable, rank `k` picked
//!   from the base weight's spectrum, no fixed scaling.
//! * [`MoSaraAdapter`]: frozen singular bases of the base weight, `m`
//!   trainable singular-value vectors mixed per token by a softmax router,
//!   and a zero-initialized diagonal `v`.

mod lora;
mod mosara;
mod sara;

use serde::{Deserialize, Serialize};

pub use lora::LoraAdapter;
pub use mosara::{MoSaraAdapter, VMode};
pub use sara::{InitMode, SaraAdapter};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::train::Param;

pub(crate) fn check_input(x: &Matrix, d_in: usize, op: &'static str) -> Result<()> {
    if x.cols() != d_in {
        return Err(Error::Shape {
            op,
            left: x.shape(),
            right: (d_in, 0),
        });
    }
    Ok(())
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")))
    }
}

/// Shape and hyperparameters of a stored adapter, kept in checkpoint meta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AdapterDescriptor {
    Lora {
        rank: usize,
        scaling: f64,
    },
    Sara {
        k: usize,
        init_mode: InitMode,
        use_lambda: bool,
    },
    Mosara {
        k: usize,
        heads: usize,
        v_mode: VMode,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    Sara(SaraAdapter),
    MoSara(MoSaraAdapter),
}

#[derive(Clone, Debug)]
pub(crate) enum AdapterCache {
    Lora(lora::LoraCache),
    Sara(sara::SaraCache),
    MoSara(mosara::MoSaraCache),
}

impl Adapter {
    pub fn method_name(&self) -> &'static str {
        match self {
            Adapter::Lora(_) => "lora",
            Adapter::Sara(_) => "sara",
            Adapter::MoSara(_) => "mosara",
        }
    }

    /// Trainable entries only.
    pub fn param_count(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.param_count(),
            Adapter::Sara(a) => a.param_count(),
            Adapter::MoSara(a) => a.param_count(),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.d_in(),
            Adapter::Sara(a) => a.d_in(),
            Adapter::MoSara(a) => a.d_in(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.d_out(),
            Adapter::Sara(a) => a.d_out(),
            Adapter::MoSara(a) => a.d_out(),
        }
    }

    pub fn branch(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Lora(a) => a.branch(x),
            Adapter::Sara(a) => a.branch(x),
            Adapter::MoSara(a) => a.branch(x),
        }
    }

    pub fn forward(&self, base_weight: &Matrix, x: &Matrix) -> Result<Matrix> {
        x.matmul(base_weight)?.add(&self.branch(x)?)
    }

    pub fn merge(&self, base_weight: &Matrix) -> Result<Matrix> {
        match self {
            Adapter::Lora(a) => a.merge(base_weight),
            Adapter::Sara(a) => a.merge(base_weight),
            Adapter::MoSara(a) => a.merge(base_weight),
        }
    }

    pub fn as_mosara(&self) -> Option<&MoSaraAdapter> {
        match self {
            Adapter::MoSara(a) => Some(a),
            _ => None,
        }
    }

    /// Parameters with their field names, in a fixed order shared with
    /// [`Self::params_mut`] and the gradient vectors of the backward pass.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        match self {
            Adapter::Lora(a) => a.params().into_iter().map(|(n, p)| (n.to_string(), p)).collect(),
            Adapter::Sara(a) => a.params().into_iter().map(|(n, p)| (n.to_string(), p)).collect(),
            Adapter::MoSara(a) => a.param_names().into_iter().zip(a.params()).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Adapter::Lora(a) => a.params_mut(),
            Adapter::Sara(a) => a.params_mut(),
            Adapter::MoSara(a) => a.params_mut(),
        }
    }

    pub fn descriptor(&self) -> AdapterDescriptor {
        match self {
            Adapter::Lora(a) => AdapterDescriptor::Lora {
                rank: a.rank,
                scaling: a.scaling,
            },
            Adapter::Sara(a) => AdapterDescriptor::Sara {
                k: a.k,
                init_mode: a.init_mode,
                use_lambda: a.use_lambda,
            },
            Adapter::MoSara(a) => AdapterDescriptor::Mosara {
                k: a.k(),
                heads: a.heads(),
                v_mode: a.v_mode,
            },
        }
    }

    pub(crate) fn branch_train(&self, x: &Matrix) -> Result<(Matrix, AdapterCache)> {
        Ok(match self {
            Adapter::Lora(a) => {
                let (y, c) = a.branch_train(x)?;
                (y, AdapterCache::Lora(c))
            }
            Adapter::Sara(a) => {
                let (y, c) = a.branch_train(x)?;
                (y, AdapterCache::Sara(c))
            }
            Adapter::MoSara(a) => {
                let (y, c) = a.branch_train(x)?;
                (y, AdapterCache::MoSara(c))
            }
        })
    }

    /// Returns the gradient with respect to the branch input and one gradient
    /// per parameter, aligned with [`Self::named_params`]. Frozen parameters
    /// get zeros.
    pub(crate) fn branch_backward(&self, cache: &AdapterCache, dy: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        match (self, cache) {
            (Adapter::Lora(a), AdapterCache::Lora(c)) => a.branch_backward(c, dy),
            (Adapter::Sara(a), AdapterCache::Sara(c)) => a.branch_backward(c, dy),
            (Adapter::MoSara(a), AdapterCache::MoSara(c)) => a.branch_backward(c, dy),
            _ => Err(Error::invalid("adapter cache does not match adapter type")),
        }
    }

    /// Stores every parameter under `{prefix}.{field}`.
    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, p) in self.named_params() {
            let key = format!("{prefix}.{name}");
            if p.vector {
                ckpt.insert_vector(key, p.values())?;
            } else {
                ckpt.insert_matrix(key, &p.value)?;
            }
        }
        Ok(())
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str, desc: &AdapterDescriptor) -> Result<Adapter> {
        let mat = |field: &str| ckpt.matrix(&format!("{prefix}.{field}"));
        let vec = |field: &str| ckpt.vector(&format!("{prefix}.{field}"));
        let adapter = match *desc {
            AdapterDescriptor::Lora { rank, scaling } => Adapter::Lora(LoraAdapter {
                a: Param::new(mat("a")?, true),
                b: Param::new(mat("b")?, true),
                scaling,
                rank,
            }),
            AdapterDescriptor::Sara {
                k,
                init_mode,
                use_lambda,
            } => Adapter::Sara(SaraAdapter {
                u: Param::new(mat("u")?, true),
                lambda: Param::vector(&vec("lambda")?, use_lambda),
                vt: Param::new(mat("vt")?, true),
                k,
                init_mode,
                use_lambda,
            }),
            AdapterDescriptor::Mosara { k: _, heads, v_mode } => Adapter::MoSara(MoSaraAdapter {
                u_frozen: Param::frozen(mat("u_frozen")?),
                vt_frozen: Param::frozen(mat("vt_frozen")?),
                lambdas: (0..heads)
                    .map(|i| vec(&format!("lambda.{i}")).map(|l| Param::vector(&l, true)))
                    .collect::<Result<_>>()?,
                wg1: Param::new(mat("wg1")?, true),
                wg2: Param::new(mat("wg2")?, true),
                v: match v_mode {
                    VMode::Off => None,
                    _ => Some(Param::vector(&vec("v")?, true)),
                },
                v_mode,
            }),
        };
        adapter.validate()?;
        Ok(adapter)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Malformed(format!("inconsistent {what} adapter shapes")));
        match self {
            Adapter::Lora(a) => {
                if a.a.value.cols() != a.rank || a.b.value.rows() != a.rank {
                    return bad("lora");
                }
            }
            Adapter::Sara(a) => {
                if a.u.value.cols() != a.k || a.lambda.numel() != a.k || a.vt.value.rows() != a.k {
                    return bad("sara");
                }
            }
            Adapter::MoSara(a) => {
                let k = a.k();
                let v_ok = match (a.v_mode, &a.v) {
                    (VMode::After, Some(v)) => v.numel() == a.d_out(),
                    (VMode::Front, Some(v)) => v.numel() == k,
                    (VMode::Off, None) => true,
                    _ => false,
                };
                if a.vt_frozen.value.rows() != k
                    || a.lambdas.iter().any(|l| l.numel() != k)
                    || a.wg1.value.shape() != (k, 1)
                    || a.wg2.value.shape() != (1, a.heads())
                    || !v_ok
                {
                    return bad("mosara");
                }
            }
        }
        Ok(())
    }
}
