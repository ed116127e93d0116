//! Threshold rank selection: how many leading singular values it takes to
//! reach a given proportion of the total singular-value mass, per matrix,
//! per layer, per threshold.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::par::Exec;

/// Relative slack absorbing rounding when the cumulative sum lands exactly on
/// the target (e.g. the all-ones spectrum).
pub const BOUNDARY_SLACK: f64 = 1e-12;

/// Smallest `k` with `s[0] + … + s[k-1] >= threshold · Σ s`.
pub fn calculate_k(singular_values: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    if singular_values.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    if let Some(i) = singular_values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "singular value {i} is negative or non-finite"
        )));
    }
    if let Some(i) = singular_values.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::Unsorted(i + 1));
    }
    let total: f64 = singular_values.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let target = threshold * total;
    let slack = BOUNDARY_SLACK * total;
    let mut cumulative = 0.0;
    let mut k = 0;
    while k < singular_values.len() && cumulative + slack < target {
        cumulative += singular_values[k];
        k += 1;
    }
    Ok(k.max(1))
}

/// `calculate_k` applied to the spectrum of `w`.
pub fn k_from_weight(w: &Matrix, threshold: f64) -> Result<usize> {
    calculate_k(&svd(w)?.s, threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankEntry {
    pub layer: usize,
    pub kind: String,
    pub threshold: f64,
    pub k: usize,
    /// Number of singular values, `min(rows, cols)`.
    pub dim: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankProfile {
    pub entries: Vec<RankEntry>,
}

impl RankProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,threshold,k,dim\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{}", e.layer, e.kind, e.threshold, e.k, e.dim);
        }
        out
    }

    pub fn get(&self, layer: usize, kind: &str, threshold: f64) -> Option<&RankEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kind == kind && e.threshold == threshold)
    }
}

/// Tensor name for a projection matrix in a model checkpoint.
pub fn weight_name(layer: usize, kind: &str) -> String {
    format!("layer.{layer}.{kind}")
}

/// Number of layers in a checkpoint: one past the largest `layer.{i}.` index.
pub fn layer_count(ckpt: &Checkpoint) -> usize {
    ckpt.names()
        .filter_map(|n| n.strip_prefix("layer.")?.split('.').next()?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

/// One entry per (layer, kind, threshold), ordered by layer, then kind in the
/// order given, then ascending threshold. Each matrix is factorized once.
pub fn rank_profile(ckpt: &Checkpoint, kinds: &[&str], thresholds: &[f64]) -> Result<RankProfile> {
    rank_profile_with(ckpt, kinds, thresholds, Exec::default())
}

pub fn rank_profile_with(
    ckpt: &Checkpoint,
    kinds: &[&str],
    thresholds: &[f64],
    exec: Exec,
) -> Result<RankProfile> {
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let layers = layer_count(ckpt);
    let jobs: Vec<(usize, &str)> = (0..layers)
        .flat_map(|l| kinds.iter().map(move |&k| (l, k)))
        .collect();
    let spectra = exec.map(jobs.len(), |i| {
        let (layer, kind) = jobs[i];
        let w = ckpt.matrix(&weight_name(layer, kind))?;
        svd(&w).map(|f| f.s)
    });
    let mut entries = Vec::with_capacity(jobs.len() * sorted.len());
    for (&(layer, kind), s) in jobs.iter().zip(spectra) {
        let s = s?;
        for &t in &sorted {
            entries.push(RankEntry {
                layer,
                kind: kind.to_string(),
                threshold: t,
                k: calculate_k(&s, t)?,
                dim: s.len(),
            });
        }
    }
    Ok(RankProfile { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use proptest::prelude::*;

    /// Independent linear scan: the first prefix length whose sum reaches
    /// the target (with the same boundary slack).
    fn oracle_k(s: &[f64], t: f64) -> usize {
        let total: f64 = s.iter().sum();
        let mut prefix = 0.0;
        for (i, v) in s.iter().enumerate() {
            if prefix + BOUNDARY_SLACK * total >= t * total {
                return i.max(1);
            }
            prefix += v;
        }
        s.len()
    }

    fn random_spectrum(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut s: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 10.0)).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    #[test]
    fn equal_values_give_proportional_count() {
        assert_eq!(calculate_k(&[1.0; 4], 0.5).unwrap(), 2);
        for d in 1..=20 {
            for t in [0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
                let expect = ((t * d as f64) - 1e-9).ceil().max(1.0) as usize;
                assert_eq!(calculate_k(&vec![1.0; d], t).unwrap(), expect, "d={d} t={t}");
            }
        }
    }

    #[test]
    fn hand_cases() {
        assert_eq!(calculate_k(&[3.0, 2.0, 1.0], 0.5).unwrap(), 1);
        assert_eq!(calculate_k(&[3.0, 2.0, 1.0], 0.9).unwrap(), 3);
    }

    #[test]
    fn errors() {
        assert!(matches!(calculate_k(&[0.0, 0.0], 0.5), Err(Error::DegenerateSpectrum)));
        assert!(matches!(calculate_k(&[1.0, 2.0], 0.5), Err(Error::Unsorted(1))));
        assert!(calculate_k(&[1.0], 0.0).is_err());
        assert!(calculate_k(&[1.0], 1.0).is_err());
        assert!(calculate_k(&[1.0, -1.0], 0.5).is_err());
    }

    #[test]
    fn random_spectra_match_oracle() {
        let mut rng = Rng::new(100);
        for case in 0..100 {
            let s = random_spectrum(&mut rng, 1 + case % 40);
            for t in 1..=9 {
                let t = t as f64 / 10.0;
                assert_eq!(calculate_k(&s, t).unwrap(), oracle_k(&s, t));
            }
        }
    }

    #[test]
    fn from_weight() {
        assert_eq!(k_from_weight(&Matrix::identity(8), 0.5).unwrap(), 4);
        assert_eq!(k_from_weight(&Matrix::from_diag(&[3.0, 2.0, 1.0]), 0.9).unwrap(), 3);
        let w = Rng::new(3).uniform_matrix(16, 16, 1.0);
        let s = svd(&w).unwrap().s;
        for t in [0.1, 0.5, 0.9] {
            assert_eq!(k_from_weight(&w, t).unwrap(), calculate_k(&s, t).unwrap());
        }
    }

    fn toy_checkpoint(layers: usize, rng: &mut Rng) -> Checkpoint {
        let mut c = Checkpoint::new();
        for l in 0..layers {
            c.insert_matrix(weight_name(l, "Q"), &rng.uniform_matrix(12, 12, 1.0)).unwrap();
            c.insert_matrix(weight_name(l, "V"), &rng.uniform_matrix(12, 12, 1.0)).unwrap();
        }
        c
    }

    #[test]
    fn profile_cardinality_and_order() {
        let c = toy_checkpoint(2, &mut Rng::new(1));
        let p = rank_profile(&c, &["Q", "V"], &[0.5]).unwrap();
        assert_eq!(p.entries.len(), 4);
        let keys: Vec<(usize, &str)> = p.entries.iter().map(|e| (e.layer, e.kind.as_str())).collect();
        assert_eq!(keys, vec![(0, "Q"), (0, "V"), (1, "Q"), (1, "V")]);
        let csv = p.to_csv();
        assert!(csv.starts_with("layer,kind,threshold,k,dim\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn constructed_spectra() {
        let mut c = Checkpoint::new();
        c.insert_matrix("layer.0.Q", &Matrix::identity(32)).unwrap();
        let mut d = vec![0.01; 32];
        d[0] = 100.0;
        c.insert_matrix("layer.1.Q", &Matrix::from_diag(&d)).unwrap();
        let p = rank_profile(&c, &["Q"], &[0.5]).unwrap();
        assert_eq!(p.entries[0].k, 16);
        assert_eq!(p.entries[1].k, 1);
    }

    #[test]
    fn every_entry_matches_direct_recomputation() {
        let c = toy_checkpoint(3, &mut Rng::new(2));
        let ts = [0.9, 0.1, 0.5];
        let p = rank_profile(&c, &["Q", "V"], &ts).unwrap();
        for e in &p.entries {
            let w = c.matrix(&weight_name(e.layer, &e.kind)).unwrap();
            assert_eq!(e.k, k_from_weight(&w, e.threshold).unwrap());
            assert!(1 <= e.k && e.k <= e.dim);
        }
        let seq = rank_profile_with(&c, &["Q", "V"], &ts, Exec::Sequential).unwrap();
        assert_eq!(seq, p);
    }

    #[test]
    fn missing_kind_names_key() {
        let c = toy_checkpoint(1, &mut Rng::new(3));
        match rank_profile(&c, &["K"], &[0.5]) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "layer.0.K"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permuting_layers_permutes_entries() {
        let mut rng = Rng::new(4);
        let ws: Vec<Matrix> = (0..3).map(|_| rng.uniform_matrix(10, 10, 1.0)).collect();
        let perm = [2usize, 0, 1];
        let mut a = Checkpoint::new();
        let mut b = Checkpoint::new();
        for l in 0..3 {
            a.insert_matrix(weight_name(l, "Q"), &ws[l]).unwrap();
            b.insert_matrix(weight_name(l, "Q"), &ws[perm[l]]).unwrap();
        }
        let ts = [0.2, 0.6];
        let pa = rank_profile(&a, &["Q"], &ts).unwrap();
        let pb = rank_profile(&b, &["Q"], &ts).unwrap();
        for l in 0..3 {
            for &t in &ts {
                assert_eq!(pb.get(l, "Q", t).unwrap().k, pa.get(perm[l], "Q", t).unwrap().k);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_threshold(raw in prop::collection::vec(0.0f64..100.0, 1..50), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let mut s = raw;
            s.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(s[0] > 0.0);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(calculate_k(&s, lo).unwrap() <= calculate_k(&s, hi).unwrap());
        }

        #[test]
        fn scale_invariant(raw in prop::collection::vec(0.0f64..100.0, 1..50), t in 0.01f64..0.99, c in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 1024.0])) {
            let mut s = raw;
            s.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(s[0] > 0.0);
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            prop_assert_eq!(calculate_k(&s, t).unwrap(), calculate_k(&scaled, t).unwrap());
        }
    }
}
