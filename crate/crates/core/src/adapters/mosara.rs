use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, softmax_rows, svd, Matrix, Rng};
use crate::rank::calculate_k;
use crate::train::Param;

use super::{check_input, check_threshold};

/// Where the zero-initialized diagonal `v` sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VMode {
    /// Length d_out, scales the output columns after `Vᵀ`.
    #[default]
    After,
    /// Length k, scales `x · U` before the mixed diagonal.
    Front,
    /// No `v` at all.
    Off,
}

impl std::str::FromStr for VMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after" => Ok(VMode::After),
            "front" => Ok(VMode::Front),
            "off" => Ok(VMode::Off),
            _ => Err(Error::invalid(format!("unknown v mode `{s}` (after, front, off)"))),
        }
    }
}

/// Frozen truncated singular bases with `m` trainable singular-value vectors
/// mixed per token by a rank-1 softmax router.
#[derive(Clone, Debug, PartialEq)]
pub struct MoSaraAdapter {
    /// d_in × k, left singular vectors of the base weight. Never trained.
    pub u_frozen: Param,
    /// k × d_out, right singular vectors of the base weight. Never trained.
    pub vt_frozen: Param,
    /// m vectors of length k.
    pub lambdas: Vec<Param>,
    /// k × 1.
    pub wg1: Param,
    /// 1 × m.
    pub wg2: Param,
    /// Zero at init; length d_out (after) or k (front), absent when off.
    pub v: Option<Param>,
    pub v_mode: VMode,
}

#[derive(Clone, Debug)]
pub(crate) struct MoSaraCache {
    z: Matrix,
    score: Matrix,
    gate: Matrix,
    mixed: Matrix,
    q: Matrix,
}

impl MoSaraAdapter {
    pub fn init(
        rng: &mut Rng,
        base_weight: &Matrix,
        threshold: f64,
        heads: usize,
        v_mode: VMode,
    ) -> Result<Self> {
        check_threshold(threshold)?;
        if heads == 0 {
            return Err(Error::invalid("mosara needs at least one head"));
        }
        let factors = svd(base_weight)?;
        let k = calculate_k(&factors.s, threshold)?;
        let t = factors.truncate(k)?;
        let lambdas = (0..heads)
            .map(|_| kaiming_uniform(rng, 1, k, k).map(|l| Param::vector(l.data(), true)))
            .collect::<Result<Vec<_>>>()?;
        let wg1 = Param::new(kaiming_uniform(rng, k, 1, k)?, true);
        let wg2 = Param::new(kaiming_uniform(rng, 1, heads, 1)?, true);
        let v = match v_mode {
            VMode::After => Some(Param::vector(&vec![0.0; base_weight.cols()], true)),
            VMode::Front => Some(Param::vector(&vec![0.0; k], true)),
            VMode::Off => None,
        };
        Ok(MoSaraAdapter {
            u_frozen: Param::frozen(t.u),
            vt_frozen: Param::frozen(t.vt),
            lambdas,
            wg1,
            wg2,
            v,
            v_mode,
        })
    }

    pub fn k(&self) -> usize {
        self.u_frozen.value.cols()
    }

    pub fn heads(&self) -> usize {
        self.lambdas.len()
    }

    pub fn d_in(&self) -> usize {
        self.u_frozen.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.vt_frozen.value.cols()
    }

    /// `m·k + k + m + len(v)`.
    pub fn param_count(&self) -> usize {
        let (m, k) = (self.heads(), self.k());
        m * k + k + m + self.v.as_ref().map_or(0, Param::numel)
    }

    fn stacked_lambdas(&self) -> Matrix {
        let k = self.k();
        let mut l = Matrix::zeros(self.heads(), k);
        for (i, p) in self.lambdas.iter().enumerate() {
            l.row_mut(i).copy_from_slice(p.values());
        }
        l
    }

    /// Per-token router probabilities, `softmax((x · U) · (wg1 · wg2))`, l × m.
    pub fn gate(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.d_in(), "mosara gate")?;
        let z = x.matmul(&self.u_frozen.value)?;
        let logits = z.matmul(&self.wg1.value)?.matmul(&self.wg2.value)?;
        Ok(softmax_rows(&logits))
    }

    pub fn branch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.branch_train(x)?.0)
    }

    /// `x · W₀ + x · U · (Σ gᵢ Λᵢ) · Vᵀ · diag(v)` (placement of `v` per mode).
    pub fn forward(&self, base_weight: &Matrix, x: &Matrix) -> Result<Matrix> {
        x.matmul(base_weight)?.add(&self.branch(x)?)
    }

    /// Folding into the base is only possible when the gate is constant,
    /// i.e. with a single head.
    pub fn merge(&self, base_weight: &Matrix) -> Result<Matrix> {
        if self.heads() != 1 {
            return Err(Error::invalid(
                "mosara with more than one head has an input-dependent gate and cannot be merged",
            ));
        }
        let mut diag = self.lambdas[0].values().to_vec();
        if let (VMode::Front, Some(v)) = (self.v_mode, &self.v) {
            diag.iter_mut().zip(v.values()).for_each(|(d, s)| *d *= s);
        }
        let mut delta = self.u_frozen.value.scale_cols(&diag)?.matmul(&self.vt_frozen.value)?;
        if let (VMode::After, Some(v)) = (self.v_mode, &self.v) {
            delta = delta.scale_cols(v.values())?;
        }
        base_weight.add(&delta)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["u_frozen".to_string(), "vt_frozen".to_string()];
        names.extend((0..self.heads()).map(|i| format!("lambda.{i}")));
        names.push("wg1".into());
        names.push("wg2".into());
        if self.v.is_some() {
            names.push("v".into());
        }
        names
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.u_frozen, &self.vt_frozen];
        ps.extend(self.lambdas.iter());
        ps.push(&self.wg1);
        ps.push(&self.wg2);
        if let Some(v) = &self.v {
            ps.push(v);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.u_frozen, &mut self.vt_frozen];
        ps.extend(self.lambdas.iter_mut());
        ps.push(&mut self.wg1);
        ps.push(&mut self.wg2);
        if let Some(v) = &mut self.v {
            ps.push(v);
        }
        ps
    }

    pub(crate) fn branch_train(&self, x: &Matrix) -> Result<(Matrix, MoSaraCache)> {
        check_input(x, self.d_in(), "mosara")?;
        let z = x.matmul(&self.u_frozen.value)?;
        let score = z.matmul(&self.wg1.value)?;
        let gate = softmax_rows(&score.matmul(&self.wg2.value)?);
        let mixed = gate.matmul(&self.stacked_lambdas())?;
        let pre = match (self.v_mode, &self.v) {
            (VMode::Front, Some(v)) => z.scale_cols(v.values())?.hadamard(&mixed)?,
            _ => z.hadamard(&mixed)?,
        };
        let q = pre.matmul(&self.vt_frozen.value)?;
        let out = match (self.v_mode, &self.v) {
            (VMode::After, Some(v)) => q.scale_cols(v.values())?,
            _ => q.clone(),
        };
        Ok((
            out,
            MoSaraCache {
                z,
                score,
                gate,
                mixed,
                q,
            },
        ))
    }

    pub(crate) fn branch_backward(&self, cache: &MoSaraCache, dy: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let MoSaraCache {
            z,
            score,
            gate,
            mixed,
            q,
        } = cache;
        let mut grad_v = None;
        let dq = match (self.v_mode, &self.v) {
            (VMode::After, Some(v)) => {
                grad_v = Some(Matrix::row_vector(&dy.hadamard(q)?.col_sums()));
                dy.scale_cols(v.values())?
            }
            _ => dy.clone(),
        };
        let dpre = dq.matmul_t(&self.vt_frozen.value)?;
        let (d_mixed, mut dz) = match (self.v_mode, &self.v) {
            (VMode::Front, Some(v)) => {
                let zv = z.scale_cols(v.values())?;
                grad_v = Some(Matrix::row_vector(
                    &dpre.hadamard(mixed)?.hadamard(z)?.col_sums(),
                ));
                (
                    dpre.hadamard(&zv)?,
                    dpre.hadamard(mixed)?.scale_cols(v.values())?,
                )
            }
            _ => (dpre.hadamard(z)?, dpre.hadamard(mixed)?),
        };

        let grad_stacked = gate.t_matmul(&d_mixed)?;
        let d_gate = d_mixed.matmul_t(&self.stacked_lambdas())?;
        let mut d_logits = d_gate.clone();
        for t in 0..gate.rows() {
            let g = gate.row(t);
            let dot: f64 = g.iter().zip(d_gate.row(t)).map(|(a, b)| a * b).sum();
            for (dl, (&gi, &dgi)) in d_logits.row_mut(t).iter_mut().zip(g.iter().zip(d_gate.row(t))) {
                *dl = gi * (dgi - dot);
            }
        }
        let grad_wg2 = score.t_matmul(&d_logits)?;
        let d_score = d_logits.matmul_t(&self.wg2.value)?;
        let grad_wg1 = z.t_matmul(&d_score)?;
        dz.add_assign(&d_score.matmul_t(&self.wg1.value)?)?;
        let dx = dz.matmul_t(&self.u_frozen.value)?;

        let mut grads = vec![self.u_frozen.zeros_like(), self.vt_frozen.zeros_like()];
        for (i, p) in self.lambdas.iter().enumerate() {
            grads.push(if p.trainable {
                grad_stacked.slice_rows(i, i + 1)
            } else {
                p.zeros_like()
            });
        }
        grads.push(if self.wg1.trainable { grad_wg1 } else { self.wg1.zeros_like() });
        grads.push(if self.wg2.trainable { grad_wg2 } else { self.wg2.zeros_like() });
        if let Some(v) = &self.v {
            grads.push(match grad_v {
                Some(g) if v.trainable => g,
                _ => v.zeros_like(),
            });
        }
        Ok((dx, grads))
    }
}
