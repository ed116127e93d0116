use proptest::prelude::*;
use sha2::{Digest, Sha256};

use sara::adapters::{Adapter, InitMode, LoraAdapter, MoSaraAdapter, SaraAdapter, VMode};
use sara::checkpoint::Checkpoint;
use sara::linalg::{svd, truncate_svd};
use sara::train::{default_config, train, AdaptedLinear, Method, Param, Regression, TrainConfig};
use sara::{Matrix, Rng};

fn digest(m: &Matrix) -> Vec<u8> {
    let mut h = Sha256::new();
    for v in m.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().to_vec()
}

fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / a.frobenius_norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let [a, b, c] = [0, 1, 2].map(|_| rng.uniform_matrix(16, 16, 1.0));
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(rel_diff(&left, &right) <= 1e-9);
    }

    #[test]
    fn svd_reconstructs_and_is_pure(seed in any::<u64>(), rows in 1usize..=32, cols in 1usize..=32) {
        let w = Rng::new(seed).uniform_matrix(rows, cols, 1.0);
        let f = svd(&w).unwrap();
        prop_assert!(rel_diff(&w, &f.reconstruct()) <= 1e-8);
        let again = svd(&w).unwrap();
        prop_assert_eq!(&f.u, &again.u);
        prop_assert_eq!(&f.s, &again.s);
        prop_assert_eq!(&f.vt, &again.vt);
    }

    #[test]
    fn truncation_error_is_the_tail_energy(seed in any::<u64>(), rows in 2usize..=24, cols in 2usize..=24, frac in 0.0f64..1.0) {
        let w = Rng::new(seed).uniform_matrix(rows, cols, 1.0);
        let f = svd(&w).unwrap();
        let k = 1 + ((f.s.len() - 1) as f64 * frac) as usize;
        let t = truncate_svd(&f, k).unwrap();
        let err2 = w.sub(&t.reconstruct()).unwrap().frobenius_norm().powi(2);
        let tail: f64 = f.s[k..].iter().map(|s| s * s).sum();
        let scale = f.s.iter().map(|s| s * s).sum::<f64>();
        prop_assert!((err2 - tail).abs() <= 1e-8 * scale.max(tail));
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = Rng::new(seed);
        let mut ckpt = Checkpoint::new();
        for i in 0..n {
            let (r, c) = (1 + rng.below(5), 1 + rng.below(5));
            ckpt.insert_matrix(format!("t{i}.{}", rng.below(100)), &rng.uniform_matrix(r, c, 10.0)).unwrap();
        }
        ckpt.meta.insert("note".into(), format!("{seed}"));
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn mosara_branch_is_linear_in_v(seed in any::<u64>(), front in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let w = rng.uniform_matrix(8, 6, 1.0);
        let mode = if front { VMode::Front } else { VMode::After };
        let mut a = MoSaraAdapter::init(&mut rng, &w, 0.7, 3, mode).unwrap();
        let v = a.v.as_mut().unwrap();
        let n = v.numel();
        *v = Param::vector(rng.uniform_matrix(1, n, 1.0).data(), true);
        let x = rng.uniform_matrix(4, 8, 1.0);
        let once = a.branch(&x).unwrap();
        let v = a.v.as_mut().unwrap();
        v.value = v.value.scale(2.0);
        let twice = a.branch(&x).unwrap();
        prop_assert!(twice.sub(&once.scale(2.0)).unwrap().max_abs() <= 1e-12 * once.max_abs().max(1.0));
    }

    #[test]
    fn training_never_touches_frozen_tensors(seed in 0u64..1000, method in 0usize..3) {
        let mut rng = Rng::new(seed);
        let w = rng.uniform_matrix(6, 6, 1.0);
        let adapter = match method {
            0 => Adapter::Sara(SaraAdapter::init(&mut rng, &w, 0.6, InitMode::Random).unwrap()),
            1 => Adapter::MoSara(MoSaraAdapter::init(&mut rng, &w, 0.6, 3, VMode::After).unwrap()),
            _ => Adapter::Lora(LoraAdapter::init(&mut rng, &w, 2, 1.0).unwrap()),
        };
        let data: Vec<Regression> = (0..8)
            .map(|_| Regression { x: rng.uniform_matrix(1, 6, 1.0), y: rng.uniform_matrix(1, 6, 1.0) })
            .collect();
        let mut model = AdaptedLinear::new(w, adapter);
        let frozen = |m: &AdaptedLinear| {
            let mut out = vec![digest(&m.base.value)];
            if let Adapter::MoSara(a) = &m.adapter {
                out.push(digest(&a.u_frozen.value));
                out.push(digest(&a.vt_frozen.value));
            }
            out
        };
        let before = frozen(&model);
        let config = TrainConfig {
            total_steps: 20,
            warmup_steps: 2,
            batch_size: 4,
            dropout: 0.1,
            seed,
            ..default_config(Method::Sara, "desk").unwrap()
        };
        train(&mut model, &data, &config).unwrap();
        prop_assert_eq!(before, frozen(&model));
    }
}
