use crate::error::{Error, Result};
use crate::linalg::{kaiming_uniform, Matrix, Rng};
use crate::train::Param;

use super::check_input;

/// Low-rank update `λ · A · B` added in parallel to a frozen weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// d_in × r, Kaiming-uniform at init.
    pub a: Param,
    /// r × d_out, zero at init.
    pub b: Param,
    pub scaling: f64,
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct LoraCache {
    x: Matrix,
    xa: Matrix,
}

impl LoraAdapter {
    pub fn init(rng: &mut Rng, base_weight: &Matrix, rank: usize, scaling: f64) -> Result<Self> {
        let (d_in, d_out) = base_weight.shape();
        if rank == 0 {
            return Err(Error::invalid("lora rank must be at least 1"));
        }
        if !scaling.is_finite() {
            return Err(Error::invalid("lora scaling must be finite"));
        }
        Ok(LoraAdapter {
            a: Param::new(kaiming_uniform(rng, d_in, rank, d_in)?, true),
            b: Param::new(Matrix::zeros(rank, d_out), true),
            scaling,
            rank,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.value.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.value.cols()
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    pub fn branch(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.d_in(), "lora")?;
        Ok(x.matmul(&self.a.value)?
            .matmul(&self.b.value)?
            .scale(self.scaling))
    }

    /// `x · W₀ + λ · x · A · B`.
    pub fn forward(&self, base_weight: &Matrix, x: &Matrix) -> Result<Matrix> {
        x.matmul(base_weight)?.add(&self.branch(x)?)
    }

    /// `W₀ + λ · A · B`.
    pub fn merge(&self, base_weight: &Matrix) -> Result<Matrix> {
        let delta = self.a.value.matmul(&self.b.value)?;
        let mut merged = base_weight.clone();
        merged.axpy(self.scaling, &delta)?;
        Ok(merged)
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![("a", &self.a), ("b", &self.b)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b]
    }

    pub(crate) fn branch_train(&self, x: &Matrix) -> Result<(Matrix, LoraCache)> {
        check_input(x, self.d_in(), "lora")?;
        let xa = x.matmul(&self.a.value)?;
        let out = xa.matmul(&self.b.value)?.scale(self.scaling);
        Ok((out, LoraCache { x: x.clone(), xa }))
    }

    pub(crate) fn branch_backward(&self, cache: &LoraCache, dy: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let lam = self.scaling;
        let grad_b = if self.b.trainable {
            cache.xa.t_matmul(dy)?.scale(lam)
        } else {
            self.b.zeros_like()
        };
        let dxa = dy.matmul_t(&self.b.value)?.scale(lam);
        let grad_a = if self.a.trainable {
            cache.x.t_matmul(&dxa)?
        } else {
            self.a.zeros_like()
        };
        let dx = dxa.matmul_t(&self.a.value)?;
        Ok((dx, vec![grad_a, grad_b]))
    }
}
