use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, svd, Matrix, Rng};
use crate::rank::calculate_k;
use crate::train::Param;

use super::{check_input, check_threshold};

/// How the three SARA factors start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// All of `u`, `lambda`, `vt` Kaiming-uniform.
    #[default]
    Random,
    /// As `Random` but with `vt` zeroed, so the adapter starts as a no-op.
    VZero,
    /// Factors copied from the truncated SVD of the base weight.
    SvdSeeded,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "v_zero" | "v-zero" => Ok(InitMode::VZero),
            "svd_seeded" | "svd-seeded" => Ok(InitMode::SvdSeeded),
            _ => Err(Error::invalid(format!(
                "unknown init mode `{s}` (random, v_zero, svd_seeded)"
            ))),
        }
    }
}

/// Trainable truncated-SVD-shaped update `U_k · diag(λ) · V_kᵀ` whose rank
/// `k` comes from the spectrum of the frozen base weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SaraAdapter {
    /// d_in × k.
    pub u: Param,
    /// The diagonal, stored as a length-k vector.
    pub lambda: Param,
    /// k × d_out.
    pub vt: Param,
    pub k: usize,
    pub init_mode: InitMode,
    pub use_lambda: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct SaraCache {
    x: Matrix,
    xu: Matrix,
    scaled: Matrix,
}

impl SaraAdapter {
    pub fn init(rng: &mut Rng, base_weight: &Matrix, threshold: f64, mode: InitMode) -> Result<Self> {
        check_threshold(threshold)?;
        let (d_in, d_out) = base_weight.shape();
        let factors = svd(base_weight)?;
        let k = calculate_k(&factors.s, threshold)?;
        let (u, lambda, vt) = match mode {
            InitMode::Random | InitMode::VZero => {
                let u = kaiming_uniform(rng, d_in, k, d_in)?;
                let lambda = kaiming_uniform(rng, 1, k, k)?;
                let mut vt = kaiming_uniform(rng, k, d_out, k)?;
                if mode == InitMode::VZero {
                    vt = Matrix::zeros(k, d_out);
                }
                (u, lambda.into_vec(), vt)
            }
            InitMode::SvdSeeded => {
                let t = factors.truncate(k)?;
                (t.u, t.s, t.vt)
            }
        };
        Ok(SaraAdapter {
            u: Param::new(u, true),
            lambda: Param::vector(&lambda, true),
            vt: Param::new(vt, true),
            k,
            init_mode: mode,
            use_lambda: true,
        })
    }

    /// Turns the diagonal off entirely (the "without Λ" ablation).
    pub fn without_lambda(mut self) -> Self {
        self.use_lambda = false;
        self.lambda.trainable = false;
        self
    }

    pub fn d_in(&self) -> usize {
        self.u.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.vt.value.cols()
    }

    pub fn param_count(&self) -> usize {
        let k = self.k;
        let factors = k * (self.d_in() + self.d_out());
        if self.use_lambda {
            factors + k
        } else {
            factors
        }
    }

    fn diag(&self) -> Vec<f64> {
        if self.use_lambda {
            self.lambda.values().to_vec()
        } else {
            vec![1.0; self.k]
        }
    }

    /// `((x · U) · diag(λ)) · Vᵀ`, no extra scaling factor.
    pub fn branch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.branch_train(x)?.0)
    }

    /// `x · W₀ + x · U · diag(λ) · Vᵀ`.
    pub fn forward(&self, base_weight: &Matrix, x: &Matrix) -> Result<Matrix> {
        x.matmul(base_weight)?.add(&self.branch(x)?)
    }

    /// One entry of the update: `Σ_r u[i,r] · λ[r] · vt[r,j]`.
    pub fn delta_entry(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.d_in() || j >= self.d_out() {
            return Err(Error::invalid(format!(
                "delta entry ({i}, {j}) outside {}x{}",
                self.d_in(),
                self.d_out()
            )));
        }
        let diag = self.diag();
        Ok((0..self.k)
            .map(|r| self.u.value.get(i, r) * diag[r] * self.vt.value.get(r, j))
            .sum())
    }

    /// The dense update `U · diag(λ) · Vᵀ`.
    pub fn delta(&self) -> Result<Matrix> {
        self.u.value.scale_cols(&self.diag())?.matmul(&self.vt.value)
    }

    /// `W₀ + U · diag(λ) · Vᵀ`; plain `x · merged` then equals [`Self::forward`].
    pub fn merge(&self, base_weight: &Matrix) -> Result<Matrix> {
        base_weight.add(&self.delta()?)
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![("u", &self.u), ("lambda", &self.lambda), ("vt", &self.vt)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.u, &mut self.lambda, &mut self.vt]
    }

    pub(crate) fn branch_train(&self, x: &Matrix) -> Result<(Matrix, SaraCache)> {
        check_input(x, self.d_in(), "sara")?;
        let xu = x.matmul(&self.u.value)?;
        let scaled = xu.scale_cols(&self.diag())?;
        let out = scaled.matmul(&self.vt.value)?;
        Ok((
            out,
            SaraCache {
                x: x.clone(),
                xu,
                scaled,
            },
        ))
    }

    pub(crate) fn branch_backward(&self, cache: &SaraCache, dy: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let grad_vt = if self.vt.trainable {
            cache.scaled.t_matmul(dy)?
        } else {
            self.vt.zeros_like()
        };
        let d_scaled = dy.matmul_t(&self.vt.value)?;
        let grad_lambda = if self.use_lambda && self.lambda.trainable {
            Matrix::row_vector(&d_scaled.hadamard(&cache.xu)?.col_sums())
        } else {
            self.lambda.zeros_like()
        };
        let dxu = d_scaled.scale_cols(&self.diag())?;
        let grad_u = if self.u.trainable {
            cache.x.t_matmul(&dxu)?
        } else {
            self.u.zeros_like()
        };
        let dx = dxu.matmul_t(&self.u.value)?;
        Ok((dx, vec![grad_u, grad_lambda, grad_vt]))
    }
}
