//! Greedy per-bucket selection over gradient features.
//!
//! For a candidate `j` in bucket `D` with current selection `C`, the gain is
//!
//! ```text
//! P(j) = Σ_{i ∈ C} sim(i, j) − Σ_{i ∈ D∖C, i ≠ j} sim(i, j)
//! ```
//!
//! with `sim` the cosine kernel. Each step picks the unselected candidate with
//! the smallest gain: least similar to what is already chosen, most similar
//! to what is still left out. Writing `sel[j] = Σ_{i∈C} sim(i, j)` and
//! `total[j] = Σ_{i≠j} sim(i, j)` gives `P(j) = 2·sel[j] − total[j]`, so one
//! O(n²) pass for `total` plus an O(n) update of `sel` per step is enough.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::partition::{self, Provenance, SelectionResult};

/// Norm floor for the cosine kernel; zero vectors get similarity ≈ 0.
pub const EPS_NORM: f64 = 1e-12;

/// Buckets at least this large update scores in parallel.
const PAR_THRESHOLD: usize = 2048;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    dot(a, b) / (na.max(EPS_NORM) * nb.max(EPS_NORM))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    cosine_with_norms(a, b, norm(a), norm(b))
}

/// Whether a candidate's similarity to itself counts in the unselected sum.
///
/// `Include` subtracts `sim(j, j)` from every gain. For nonzero features that
/// is the constant 1, so both conventions choose the same sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SelfTerm {
    #[default]
    Exclude,
    Include,
}

#[derive(Debug, Clone)]
pub struct BucketSelectionState<'a, V> {
    members: &'a [V],
    norms: Vec<f64>,
    total_sim: Vec<f64>,
    sel_sim: Vec<f64>,
    self_sim: Vec<f64>,
    selected: Vec<usize>,
    is_selected: Vec<bool>,
    self_term: SelfTerm,
}

impl<'a, V: AsRef<[f64]> + Sync> BucketSelectionState<'a, V> {
    pub fn new(members: &'a [V], self_term: SelfTerm) -> Result<Self> {
        let dim = members.first().map_or(0, |v| v.as_ref().len());
        if let Some(bad) = members.iter().find(|v| v.as_ref().len() != dim) {
            return Err(Error::Dimension {
                what: "bucket feature",
                expected: dim,
                actual: bad.as_ref().len(),
            });
        }
        let norms: Vec<f64> = members.iter().map(|v| norm(v.as_ref())).collect();
        let n = members.len();
        let row_sum = |j: usize| {
            let a = members[j].as_ref();
            (0..n)
                .filter(|&i| i != j)
                .map(|i| cosine_with_norms(members[i].as_ref(), a, norms[i], norms[j]))
                .sum::<f64>()
        };
        let total_sim: Vec<f64> = if n >= PAR_THRESHOLD {
            (0..n).into_par_iter().map(row_sum).collect()
        } else {
            (0..n).map(row_sum).collect()
        };
        // Exact form of sim(v, v): 1 above the norm floor, (|v|/ε)² below it.
        let self_sim = norms
            .iter()
            .map(|&nv| if nv >= EPS_NORM { 1.0 } else { (nv / EPS_NORM).powi(2) })
            .collect();
        Ok(Self {
            members,
            norms,
            total_sim,
            sel_sim: vec![0.0; n],
            self_sim,
            selected: Vec::new(),
            is_selected: vec![false; n],
            self_term,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// `Σ_{i≠j} sim(i, j)` over the whole bucket.
    pub fn total_sim(&self) -> &[f64] {
        &self.total_sim
    }

    /// `Σ_{i∈C, i≠j} sim(i, j)` over the current selection.
    pub fn sel_sim(&self) -> &[f64] {
        &self.sel_sim
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn is_selected(&self, j: usize) -> bool {
        self.is_selected[j]
    }

    fn gain_unchecked(&self, j: usize) -> f64 {
        let p = 2.0 * self.sel_sim[j] - self.total_sim[j];
        match self.self_term {
            SelfTerm::Exclude => p,
            SelfTerm::Include => p - self.self_sim[j],
        }
    }

    pub fn gain(&self, j: usize) -> Result<f64> {
        if j >= self.len() {
            return Err(Error::Membership(format!("candidate {j} outside bucket of {}", self.len())));
        }
        if self.is_selected[j] {
            return Err(Error::Membership(format!("candidate {j} is already selected")));
        }
        Ok(self.gain_unchecked(j))
    }

    /// Whether `j` has a strictly smaller gain than `k`. Equal self terms
    /// cancel, so those pairs compare without the extra rounding step.
    fn beats(&self, j: usize, k: usize) -> bool {
        if self.self_term == SelfTerm::Include && self.self_sim[j] != self.self_sim[k] {
            self.gain_unchecked(j) < self.gain_unchecked(k)
        } else {
            let raw = |i: usize| 2.0 * self.sel_sim[i] - self.total_sim[i];
            raw(j) < raw(k)
        }
    }

    /// Unselected candidate with the smallest gain; lowest index on ties.
    pub fn best_candidate(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in (0..self.len()).filter(|&j| !self.is_selected[j]) {
            if best.is_none_or(|b| self.beats(j, b)) {
                best = Some(j);
            }
        }
        best
    }

    /// Adds `s` to the selection and folds its similarities into `sel_sim`.
    pub fn select(&mut self, s: usize) -> Result<()> {
        self.gain(s)?;
        self.is_selected[s] = true;
        self.selected.push(s);
        let members = self.members;
        let norms = &self.norms;
        let a = members[s].as_ref();
        let ns = norms[s];
        let update = |(j, slot): (usize, &mut f64)| {
            if j != s {
                *slot += cosine_with_norms(a, members[j].as_ref(), ns, norms[j]);
            }
        };
        if self.sel_sim.len() >= PAR_THRESHOLD {
            self.sel_sim.par_iter_mut().enumerate().for_each(update);
        } else {
            self.sel_sim.iter_mut().enumerate().for_each(update);
        }
        Ok(())
    }

    /// One greedy step. Returns the chosen index, or `None` when exhausted.
    pub fn step(&mut self) -> Option<usize> {
        let j = self.best_candidate()?;
        self.select(j).expect("best candidate is unselected");
        Some(j)
    }
}

/// Greedily picks `n_k` members of a bucket, returning their indices in the
/// order they were chosen.
pub fn select_bucket<V: AsRef<[f64]> + Sync>(features: &[V], n_k: usize, self_term: SelfTerm) -> Result<Vec<usize>> {
    if n_k > features.len() {
        return Err(Error::Budget(format!(
            "asked for {n_k} of a bucket with {} members",
            features.len()
        )));
    }
    if n_k == 0 {
        return Ok(Vec::new());
    }
    let mut state = BucketSelectionState::new(features, self_term)?;
    for _ in 0..n_k {
        state.step();
    }
    Ok(state.selected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstpConfig {
    pub alpha: f64,
    pub tau: usize,
    pub self_term: SelfTerm,
    /// Recorded in provenance only; the selection is deterministic.
    pub seed: u64,
}

impl Default for SstpConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: partition::DEFAULT_TAU,
            self_term: SelfTerm::Exclude,
            seed: 0,
        }
    }
}

/// The full pipeline: partition by density, assign budgets densest bucket
/// first, then fill each bucket greedily. Buckets whose budget covers them
/// entirely are kept whole without running the greedy loop.
pub fn sstp_select(features: &FeatureSet, cfg: &SstpConfig, source_hash: &str) -> Result<SelectionResult> {
    let plan = partition::partition(features, cfg.tau)?;
    let budgets = partition::dynamic_budget(&plan, cfg.alpha)?;
    let selections = plan
        .buckets
        .par_iter()
        .map(|bucket| {
            let n_k = budgets.n(bucket.k);
            if n_k == bucket.len() {
                return Ok(bucket.ids.clone());
            }
            let vectors: Vec<&[f64]> = bucket.members.iter().map(|&i| features.records[i].g.as_slice()).collect();
            let picked = select_bucket(&vectors, n_k, cfg.self_term)?;
            Ok(picked.into_iter().map(|i| bucket.ids[i].clone()).collect())
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    partition::assemble(
        &plan,
        &budgets,
        &selections,
        Provenance {
            method: "sstp".into(),
            alpha: cfg.alpha,
            tau: Some(cfg.tau),
            seed: cfg.seed,
            source_hash: source_hash.to_owned(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRecord;
    use proptest::prelude::*;

    fn fixture() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]
    }

    /// Recomputes every gain from raw vectors.
    fn naive_gains(features: &[Vec<f64>], selected: &[usize]) -> Vec<Option<f64>> {
        (0..features.len())
            .map(|j| {
                if selected.contains(&j) {
                    return None;
                }
                let mut p = 0.0;
                for (i, f) in features.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let s = cosine_sim(f, &features[j]);
                    p += if selected.contains(&i) { s } else { -s };
                }
                Some(p)
            })
            .collect()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[3.0, -2.0, 1.0], &[3.0, -2.0, 1.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn gains_on_fixture() {
        let f = fixture();
        let mut st = BucketSelectionState::new(&f, SelfTerm::Exclude).unwrap();
        let gains: Vec<f64> = (0..3).map(|j| st.gain(j).unwrap()).collect();
        assert_eq!(gains, vec![-1.0, -1.0, 0.0]);
        st.select(0).unwrap();
        assert_eq!(st.gain(1).unwrap(), 1.0);
        assert_eq!(st.gain(2).unwrap(), 0.0);
        assert!(matches!(st.gain(0), Err(Error::Membership(_))));
        assert!(st.select(0).is_err());
    }

    #[test]
    fn fixture_defers_the_duplicate() {
        assert_eq!(select_bucket(&fixture(), 2, SelfTerm::Exclude).unwrap(), vec![0, 2]);
        assert_eq!(select_bucket(&fixture(), 3, SelfTerm::Exclude).unwrap(), vec![0, 2, 1]);
        assert!(select_bucket(&fixture(), 0, SelfTerm::Exclude).unwrap().is_empty());
        assert!(matches!(select_bucket(&fixture(), 4, SelfTerm::Exclude), Err(Error::Budget(_))));
    }

    #[test]
    fn orthogonal_bucket_has_zero_gains_throughout() {
        let f: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|d| if d == i { 2.0 } else { 0.0 }).collect()).collect();
        let mut st = BucketSelectionState::new(&f, SelfTerm::Exclude).unwrap();
        for _ in 0..4 {
            for j in (0..4).filter(|&j| !st.is_selected(j)) {
                assert_eq!(st.gain(j).unwrap(), 0.0);
            }
            st.step();
        }
        assert_eq!(st.selected(), &[0, 1, 2, 3]);
    }

    #[test]
    fn zero_features_are_neutral() {
        let f = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.1]];
        let st = BucketSelectionState::new(&f, SelfTerm::Exclude).unwrap();
        assert_eq!(st.gain(0).unwrap(), 0.0);
        assert!(st.gain(1).unwrap() < 0.0);
    }

    #[test]
    fn ragged_bucket_is_rejected() {
        let f = vec![vec![1.0, 0.0], vec![1.0]];
        assert!(matches!(BucketSelectionState::new(&f, SelfTerm::Exclude), Err(Error::Dimension { .. })));
    }

    #[test]
    fn large_bucket_parallel_path_matches_small_path_semantics() {
        // Above PAR_THRESHOLD the update runs on rayon; the sequence must not depend on it.
        let n = PAR_THRESHOLD + 17;
        let f: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64 * 0.61803;
                vec![t.sin(), (2.0 * t).cos(), (0.5 * t).sin() + 0.1]
            })
            .collect();
        let a = select_bucket(&f, 25, SelfTerm::Exclude).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| select_bucket(&f, 25, SelfTerm::Exclude).unwrap());
        assert_eq!(a, b);
    }

    fn features_with(densities: &[usize], vectors: Vec<Vec<f64>>) -> FeatureSet {
        let dim = vectors[0].len();
        FeatureSet::new(
            dim,
            densities
                .iter()
                .zip(vectors)
                .enumerate()
                .map(|(i, (&d, g))| FeatureRecord {
                    scene_id: format!("s{i}"),
                    density: d,
                    g,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pipeline_alpha_one_keeps_everything() {
        let fs = features_with(&[2, 3, 15, 40], vec![vec![1.0, 0.0]; 4]);
        let sel = sstp_select(&fs, &SstpConfig { alpha: 1.0, ..SstpConfig::default() }, "h").unwrap();
        let mut ids: Vec<_> = sel.ids().collect();
        ids.sort();
        assert_eq!(ids, vec!["s0", "s1", "s2", "s3"]);
        assert_eq!(sel.provenance.source_hash, "h");
    }

    #[test]
    fn pipeline_on_fixture_bucket() {
        let fs = features_with(&[4, 4, 4], fixture());
        let sel = sstp_select(&fs, &SstpConfig { alpha: 0.7, ..SstpConfig::default() }, "").unwrap();
        assert_eq!(sel.ids().collect::<Vec<_>>(), vec!["s0", "s2"]);
    }

    fn arb_bucket() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..=8, 1usize..=20).prop_flat_map(|(dim, n)| {
            (prop::collection::vec(prop::collection::vec(-1.0..1.0f64, dim), n), 0..=n)
        })
    }

    proptest! {
        #[test]
        fn greedy_matches_naive_oracle((f, n_k) in arb_bucket()) {
            let got = select_bucket(&f, n_k, SelfTerm::Exclude).unwrap();
            let mut selected = Vec::new();
            for _ in 0..n_k {
                let gains = naive_gains(&f, &selected);
                let mut best = None::<(usize, f64)>;
                for (j, g) in gains.iter().enumerate() {
                    if let Some(g) = g {
                        if best.is_none_or(|(_, b)| *g < b) {
                            best = Some((j, *g));
                        }
                    }
                }
                selected.push(best.unwrap().0);
            }
            prop_assert_eq!(got, selected);
        }

        #[test]
        fn self_term_does_not_change_sequence((f, n_k) in arb_bucket()) {
            prop_assert_eq!(
                select_bucket(&f, n_k, SelfTerm::Exclude).unwrap(),
                select_bucket(&f, n_k, SelfTerm::Include).unwrap()
            );
        }

        #[test]
        fn positive_scaling_does_not_change_sequence((f, n_k) in arb_bucket(), scale in 1e-3..1e3f64) {
            let scaled: Vec<Vec<f64>> = f.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
            prop_assert_eq!(
                select_bucket(&f, n_k, SelfTerm::Exclude).unwrap(),
                select_bucket(&scaled, n_k, SelfTerm::Exclude).unwrap()
            );
        }
    }
}
