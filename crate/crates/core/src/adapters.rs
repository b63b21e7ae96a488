//! Task-vector extraction and compression: weight deltas between a tuned
//! policy and its base, global magnitude pruning, low-rank factorization into
//! adapter pairs, rescale calibration, and sign-elected weighted merging.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::{svd, truncate, DenseMatrix};
use crate::simplex::PreferenceVector;

/// Named weight tensors for the adapted linear modules of a network.
pub type WeightMap = BTreeMap<String, DenseMatrix>;

/// Fraction of entries kept by the default pruning step (40% pruned).
pub const DEFAULT_KEEP_FRACTION: f64 = 0.6;

/// Default rescale calibration grid, bracketing the reference factor 1.9.
pub const RESCALE_CANDIDATES: [f64; 13] =
    [0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0];

/// Per-module weight deltas between a fine-tuned network and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveVector {
    pub deltas: WeightMap,
}

impl ObjectiveVector {
    /// Total scalar entries across all modules.
    pub fn total_entries(&self) -> usize {
        self.deltas.values().map(|m| m.data().len()).sum()
    }

    /// Count of nonzero entries across all modules.
    pub fn nonzero_entries(&self) -> usize {
        self.deltas
            .values()
            .flat_map(|m| m.data())
            .filter(|v| **v != 0.0)
            .count()
    }
}

/// A compressed expert: low-rank adapter pairs per module plus the rescale
/// factor and the preference it was trained for. The effective weight delta
/// for a module is `rescale * up * down`.
#[derive(Debug, Clone)]
pub struct LoraExpert {
    pub id: String,
    pub preference: PreferenceVector,
    pub rank: usize,
    pub rescale: f64,
    pub modules: BTreeMap<String, LoraPair>,
}

/// One factorized module delta: `up` is d_out x rank, `down` is rank x d_in.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub down: DenseMatrix,
    pub up: DenseMatrix,
}

impl LoraExpert {
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

/// Element-wise difference `finetuned - base` over matching module sets.
pub fn objective_vector(finetuned: &WeightMap, base: &WeightMap) -> Result<ObjectiveVector> {
    if finetuned.len() != base.len() {
        return Err(Error::IncompatibleModels(format!(
            "module count mismatch: {} vs {}",
            finetuned.len(),
            base.len()
        )));
    }
    let mut deltas = BTreeMap::new();
    for (name, tuned) in finetuned {
        let Some(pre) = base.get(name) else {
            return Err(Error::IncompatibleModels(format!("module {name} missing in base")));
        };
        let delta = tuned.sub(pre).map_err(|_| {
            Error::IncompatibleModels(format!(
                "module {name} shape mismatch: {:?} vs {:?}",
                tuned.shape(),
                pre.shape()
            ))
        })?;
        deltas.insert(name.clone(), delta);
    }
    Ok(ObjectiveVector { deltas })
}

/// Keeps the globally largest entries by magnitude and zeroes the rest.
///
/// Exactly `round(keep_fraction * total)` entries survive; magnitude ties
/// resolve toward the earlier entry in module-name order. Kept values are
/// copied unchanged.
pub fn magnitude_prune(tau: &ObjectiveVector, keep_fraction: f64) -> Result<ObjectiveVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    if keep_fraction == 1.0 {
        return Ok(tau.clone());
    }
    let total = tau.total_entries();
    let keep = ((keep_fraction * total as f64).round() as usize).min(total);

    // Global flat index over (module in name order, row-major entries).
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(total);
    let mut offset = 0;
    for m in tau.deltas.values() {
        for (i, &v) in m.data().iter().enumerate() {
            order.push((v.abs(), offset + i));
        }
        offset += m.data().len();
    }
    order.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep_mask = vec![false; total];
    for &(_, idx) in order.iter().take(keep) {
        keep_mask[idx] = true;
    }

    let mut deltas = BTreeMap::new();
    let mut offset = 0;
    for (name, m) in &tau.deltas {
        let data: Vec<f32> = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep_mask[offset + i] { v } else { 0.0 })
            .collect();
        offset += m.data().len();
        deltas.insert(name.clone(), DenseMatrix::from_vec(m.rows(), m.cols(), data)?);
    }
    Ok(ObjectiveVector { deltas })
}

/// Factorizes every module delta into a rank-truncated adapter pair.
///
/// The input is expected to be pruned already; this step only decomposes.
/// The expert id is derived from the preference and can be replaced with
/// [`LoraExpert::with_id`].
pub fn task_svd(
    tau: &ObjectiveVector,
    rank: usize,
    rescale: f64,
    preference: &PreferenceVector,
) -> Result<LoraExpert> {
    if !(rescale.is_finite() && rescale > 0.0) {
        return Err(Error::InvalidInput(format!("rescale {rescale} must be positive")));
    }
    let mut modules = BTreeMap::new();
    for (name, delta) in &tau.deltas {
        let decomp = svd(delta)?;
        let (down, up) = truncate(&decomp, rank).map_err(|e| match e {
            Error::RankTooLarge { rank, max } => Error::RankTooLarge { rank, max },
            other => other,
        })?;
        modules.insert(name.clone(), LoraPair { down, up });
    }
    let id = preference
        .weights()
        .iter()
        .map(|w| format!("{w:.2}"))
        .collect::<Vec<_>>()
        .join("_");
    Ok(LoraExpert {
        id: format!("expert_{id}"),
        preference: preference.clone(),
        rank,
        rescale,
        modules,
    })
}

/// Picks the rescale factor from `candidates` that maximizes `score_fn`;
/// exact ties resolve toward the smallest candidate.
pub fn calibrate_rescale<F>(
    expert: &LoraExpert,
    score_fn: F,
    candidates: &[f64],
) -> Result<LoraExpert>
where
    F: Fn(&LoraExpert) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no rescale candidates".into()));
    }
    let mut sorted = candidates.to_vec();
    for &c in &sorted {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidInput(format!("rescale candidate {c} must be positive")));
        }
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut probe = expert.clone();
    let mut best: Option<(f64, f64)> = None;
    for &gamma in &sorted {
        probe.rescale = gamma;
        let score = score_fn(&probe);
        match best {
            Some((best_score, _)) if score <= best_score => {}
            _ => best = Some((score, gamma)),
        }
    }
    let mut out = expert.clone();
    out.rescale = best.expect("candidates non-empty").1;
    Ok(out)
}

/// Preference-weighted trim, sign election, and disjoint mean.
///
/// Each task vector is first pruned to its own top `keep_fraction` entries.
/// Per entry, the elected sign is the sign of the lambda-weighted sum; the
/// merged value averages the sign-matching contributions weighted by lambda,
/// or zero when nothing survives. A one-hot lambda recovers that task vector
/// exactly.
pub fn merge(
    taus: &[ObjectiveVector],
    lambda: &PreferenceVector,
    keep_fraction: f64,
) -> Result<ObjectiveVector> {
    if taus.len() != lambda.dim() {
        return Err(Error::IncompatibleModels(format!(
            "{} task vectors but lambda has {} objectives",
            taus.len(),
            lambda.dim()
        )));
    }
    let first = &taus[0];
    for t in &taus[1..] {
        if t.deltas.len() != first.deltas.len() {
            return Err(Error::IncompatibleModels("module set mismatch in merge".into()));
        }
        for (name, m) in &t.deltas {
            let Some(f) = first.deltas.get(name) else {
                return Err(Error::IncompatibleModels(format!("module {name} missing")));
            };
            if m.shape() != f.shape() {
                return Err(Error::IncompatibleModels(format!(
                    "module {name} shape mismatch in merge"
                )));
            }
        }
    }
    let trimmed: Vec<ObjectiveVector> = taus
        .iter()
        .map(|t| magnitude_prune(t, keep_fraction))
        .collect::<Result<_>>()?;

    let lam = lambda.weights();
    let mut deltas = BTreeMap::new();
    for (name, proto) in &first.deltas {
        let len = proto.data().len();
        let mut data = vec![0.0f32; len];
        for e in 0..len {
            let mut weighted_sum = 0.0f64;
            for (i, t) in trimmed.iter().enumerate() {
                weighted_sum += lam[i] * t.deltas[name].data()[e] as f64;
            }
            let elected = if weighted_sum > 0.0 {
                1.0
            } else if weighted_sum < 0.0 {
                -1.0
            } else {
                continue; // no survivor, entry stays zero
            };
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (i, t) in trimmed.iter().enumerate() {
                let v = t.deltas[name].data()[e] as f64;
                if v * elected > 0.0 {
                    num += lam[i] * v;
                    den += lam[i];
                }
            }
            // den > 0: a nonzero weighted sum needs a sign-matching
            // contributor with positive lambda.
            data[e] = (num / den) as f32;
        }
        deltas.insert(name.clone(), DenseMatrix::from_vec(proto.rows(), proto.cols(), data)?);
    }
    Ok(ObjectiveVector { deltas })
}

/// Expands an expert back into dense per-module deltas, `rescale * up * down`.
pub fn to_dense(expert: &LoraExpert) -> Result<ObjectiveVector> {
    let mut deltas = BTreeMap::new();
    for (name, pair) in &expert.modules {
        let dense = pair.up.matmul(&pair.down)?.scale(expert.rescale);
        deltas.insert(name.clone(), dense);
    }
    Ok(ObjectiveVector { deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::RngStream;
    use proptest::prelude::*;

    fn random_map(rng: &mut RngStream, shapes: &[(&str, usize, usize)]) -> WeightMap {
        let mut map = BTreeMap::new();
        for &(name, r, c) in shapes {
            let data: Vec<f32> = (0..r * c).map(|_| rng.next_normal() as f32).collect();
            map.insert(name.to_string(), DenseMatrix::from_vec(r, c, data).unwrap());
        }
        map
    }

    fn single(values: &[f32]) -> ObjectiveVector {
        let mut deltas = BTreeMap::new();
        deltas.insert(
            "m".to_string(),
            DenseMatrix::from_vec(1, values.len(), values.to_vec()).unwrap(),
        );
        ObjectiveVector { deltas }
    }

    #[test]
    fn objective_vector_matches_elementwise_subtraction() {
        let mut rng = RngStream::new(11, 0);
        let shapes = [("w1", 4, 5), ("w2", 3, 4)];
        let tuned = random_map(&mut rng, &shapes);
        let base = random_map(&mut rng, &shapes);
        let tau = objective_vector(&tuned, &base).unwrap();
        for (name, delta) in &tau.deltas {
            let t = &tuned[name];
            let b = &base[name];
            for i in 0..delta.data().len() {
                let want = (t.data()[i] as f64 - b.data()[i] as f64) as f32;
                assert_eq!(delta.data()[i], want);
            }
        }
        let zero = objective_vector(&tuned, &tuned).unwrap();
        assert_eq!(zero.nonzero_entries(), 0);
    }

    #[test]
    fn objective_vector_rejects_mismatch() {
        let mut rng = RngStream::new(12, 0);
        let a = random_map(&mut rng, &[("w1", 4, 5)]);
        let b = random_map(&mut rng, &[("w1", 5, 4)]);
        assert!(matches!(objective_vector(&a, &b), Err(Error::IncompatibleModels(_))));
        let c = random_map(&mut rng, &[("other", 4, 5)]);
        assert!(objective_vector(&a, &c).is_err());
    }

    #[test]
    fn prune_worked_example() {
        let tau = single(&[3.0, -1.0, 0.5, -2.0]);
        let pruned = magnitude_prune(&tau, 0.5).unwrap();
        assert_eq!(pruned.deltas["m"].data(), &[3.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn prune_keep_all_is_identity() {
        let tau = single(&[3.0, -1.0, 0.5, -2.0]);
        assert_eq!(magnitude_prune(&tau, 1.0).unwrap(), tau);
        assert!(magnitude_prune(&tau, 0.0).is_err());
        assert!(magnitude_prune(&tau, 1.5).is_err());
    }

    #[test]
    fn prune_is_global_across_modules() {
        let mut deltas = BTreeMap::new();
        deltas.insert("a".into(), DenseMatrix::from_vec(1, 2, vec![5.0, 0.1]).unwrap());
        deltas.insert("b".into(), DenseMatrix::from_vec(1, 2, vec![4.0, 3.0]).unwrap());
        let pruned = magnitude_prune(&ObjectiveVector { deltas }, 0.75).unwrap();
        // 3 of 4 kept: 5, 4, 3; the 0.1 in module a goes.
        assert_eq!(pruned.deltas["a"].data(), &[5.0, 0.0]);
        assert_eq!(pruned.deltas["b"].data(), &[4.0, 3.0]);
    }

    #[test]
    fn task_svd_full_rank_round_trips() {
        let mut rng = RngStream::new(13, 0);
        let mut deltas = BTreeMap::new();
        for name in ["w1", "w2"] {
            let data: Vec<f32> = (0..6 * 4).map(|_| rng.next_normal() as f32).collect();
            deltas.insert(name.to_string(), DenseMatrix::from_vec(6, 4, data).unwrap());
        }
        let tau = ObjectiveVector { deltas };
        let pref = PreferenceVector::new(vec![1.0, 0.0]).unwrap();
        let expert = task_svd(&tau, 4, 1.0, &pref).unwrap();
        let dense = to_dense(&expert).unwrap();
        for (name, want) in &tau.deltas {
            let got = &dense.deltas[name];
            let diff = got.sub(want).unwrap().frobenius_norm();
            let rel = diff / want.frobenius_norm();
            assert!(rel < 1e-5, "module {name} relative error {rel}");
        }
    }

    #[test]
    fn task_svd_rank_one_synthetic_is_exact() {
        let u = [1.0f32, -2.0, 0.5];
        let v = [2.0f32, 1.0, -1.0, 0.25];
        let mut data = Vec::new();
        for &a in &u {
            for &b in &v {
                data.push(a * b);
            }
        }
        let mut deltas = BTreeMap::new();
        deltas.insert("m".into(), DenseMatrix::from_vec(3, 4, data).unwrap());
        let tau = ObjectiveVector { deltas };
        let pref = PreferenceVector::new(vec![1.0]).unwrap();
        let expert = task_svd(&tau, 1, 1.0, &pref).unwrap();
        let dense = to_dense(&expert).unwrap();
        let diff = dense.deltas["m"].sub(&tau.deltas["m"]).unwrap().frobenius_norm();
        assert!(diff < 1e-6, "rank-1 reconstruction error {diff}");
    }

    #[test]
    fn task_svd_rejects_oversized_rank() {
        let tau = single(&[1.0, 2.0, 3.0]);
        let pref = PreferenceVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            task_svd(&tau, 2, 1.0, &pref),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn calibrate_picks_argmax_then_smallest() {
        let tau = single(&[1.0, 2.0]);
        let pref = PreferenceVector::new(vec![1.0]).unwrap();
        let expert = task_svd(&tau, 1, 1.0, &pref).unwrap();
        let best =
            calibrate_rescale(&expert, |e| -(e.rescale - 1.5).abs(), &[0.5, 1.0, 1.5]).unwrap();
        assert_eq!(best.rescale, 1.5);
        let tied = calibrate_rescale(&expert, |_| 0.0, &[1.5, 0.5, 1.0]).unwrap();
        assert_eq!(tied.rescale, 0.5);
        assert!(calibrate_rescale(&expert, |_| 0.0, &[]).is_err());
    }

    #[test]
    fn merge_one_hot_recovers_contributor() {
        let mut rng = RngStream::new(14, 0);
        let t0 = ObjectiveVector { deltas: random_map(&mut rng, &[("w", 3, 3)]) };
        let t1 = ObjectiveVector { deltas: random_map(&mut rng, &[("w", 3, 3)]) };
        let lam = PreferenceVector::new(vec![0.0, 1.0]).unwrap();
        let merged = merge(&[t0, t1.clone()], &lam, 1.0).unwrap();
        assert_eq!(merged, t1);
    }

    #[test]
    fn merge_consensus_returns_shared_tau() {
        let mut rng = RngStream::new(15, 0);
        let t = ObjectiveVector { deltas: random_map(&mut rng, &[("w", 2, 4)]) };
        let lam = PreferenceVector::new(vec![0.5, 0.5]).unwrap();
        let merged = merge(&[t.clone(), t.clone()], &lam, 1.0).unwrap();
        for (name, m) in &merged.deltas {
            for (got, want) in m.data().iter().zip(t.deltas[name].data()) {
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn merge_hand_example() {
        let t0 = single(&[2.0]);
        let t1 = single(&[-1.0]);
        let lam = PreferenceVector::new(vec![0.7, 0.3]).unwrap();
        let merged = merge(&[t0, t1], &lam, 1.0).unwrap();
        // Elected sign +, only the first contributes: 0.7*2/0.7.
        assert!((merged.deltas["m"].data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn merge_rejects_mismatched_arity() {
        let t = single(&[1.0]);
        let lam = PreferenceVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            merge(&[t], &lam, 1.0),
            Err(Error::IncompatibleModels(_))
        ));
    }

    #[test]
    fn to_dense_scales_linearly() {
        let tau = single(&[1.0, 2.0, -0.5]);
        let pref = PreferenceVector::new(vec![1.0]).unwrap();
        let mut expert = task_svd(&tau, 1, 1.0, &pref).unwrap();
        let base = to_dense(&expert).unwrap();
        expert.rescale = 2.0;
        let doubled = to_dense(&expert).unwrap();
        for (a, b) in base.deltas["m"].data().iter().zip(doubled.deltas["m"].data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prune_keeps_exact_count_and_values(
            values in proptest::collection::vec(-10.0f32..10.0, 8..40),
            keep in 0.1f64..1.0,
        ) {
            let tau = single(&values);
            let total = values.len();
            let pruned = magnitude_prune(&tau, keep).unwrap();
            let want = ((keep * total as f64).round() as usize).min(total);
            // Zeros in the input can only reduce the visible nonzero count.
            let kept_nonzero = pruned.nonzero_entries();
            prop_assert!(kept_nonzero <= want);
            let mut changed = 0;
            for (got, orig) in pruned.deltas["m"].data().iter().zip(&values) {
                if *got != 0.0 {
                    prop_assert_eq!(got, orig);
                } else if *orig != 0.0 {
                    changed += 1;
                }
            }
            prop_assert_eq!(changed, total - want);
        }

        #[test]
        fn merge_is_homogeneous_under_one_hot(
            values in proptest::collection::vec(-5.0f32..5.0, 4..16),
            scale in 0.5f64..3.0,
        ) {
            let tau = single(&values);
            let scaled = ObjectiveVector {
                deltas: tau
                    .deltas
                    .iter()
                    .map(|(k, v)| (k.clone(), v.scale(scale)))
                    .collect(),
            };
            let other = single(&vec![1.0; values.len()]);
            let lam = PreferenceVector::new(vec![1.0, 0.0]).unwrap();
            let m1 = merge(&[tau, other.clone()], &lam, 1.0).unwrap();
            let m2 = merge(&[scaled, other], &lam, 1.0).unwrap();
            for (a, b) in m1.deltas["m"].data().iter().zip(m2.deltas["m"].data()) {
                prop_assert!((*a as f64 * scale - *b as f64).abs() < 1e-4);
            }
        }

        #[test]
        fn merge_entries_stay_in_contributor_range(
            v0 in proptest::collection::vec(-5.0f32..5.0, 6),
            v1 in proptest::collection::vec(-5.0f32..5.0, 6),
            w in 0.0f64..1.0,
        ) {
            let lam = PreferenceVector::new(vec![w, 1.0 - w]).unwrap();
            let merged = merge(&[single(&v0), single(&v1)], &lam, 1.0).unwrap();
            for i in 0..6 {
                let lo = v0[i].min(v1[i]).min(0.0);
                let hi = v0[i].max(v1[i]).max(0.0);
                let got = merged.deltas["m"].data()[i];
                prop_assert!(got >= lo - 1e-5 && got <= hi + 1e-5,
                    "entry {i}: {got} outside [{lo}, {hi}]");
            }
        }
    }
}
