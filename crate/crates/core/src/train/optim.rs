use super::config::{lr_at, TrainConfig};
use super::Param;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update of every trainable parameter from its `grad`, with
/// bias correction for update number `step + 1` and decoupled weight decay.
/// Returns the learning rate used.
pub fn adamw_step(params: &mut [&mut Param], config: &TrainConfig, step: usize) -> f64 {
    let lr = lr_at(step, config);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for p in params.iter_mut().filter(|p| p.trainable) {
        let Param {
            value,
            grad,
            adam_m,
            adam_v,
            ..
        } = &mut **p;
        let it = value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(adam_m.data_mut().iter_mut().zip(adam_v.data_mut()));
        for ((w, &g), (m, v)) in it {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    lr
}
