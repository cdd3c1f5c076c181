//! Reference selectors: uniform random, k-means representatives and herding.
//!
//! All three take the same features and budget as the greedy selector and can
//! run either over the whole set or inside each density bucket under the same
//! [`BudgetPlan`](crate::partition::BudgetPlan).

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::partition::{self, BucketSelection, Provenance, SelectionResult};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Random,
    Kmeans,
    Herding,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Random => "random",
            BaselineMethod::Kmeans => "kmeans",
            BaselineMethod::Herding => "herding",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineMethod::Random),
            "kmeans" => Ok(BaselineMethod::Kmeans),
            "herding" => Ok(BaselineMethod::Herding),
            other => Err(Error::InvalidConfig(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub seed: u64,
    /// Defaults to the budget (one representative per cluster).
    pub kmeans_clusters: Option<usize>,
    pub kmeans_max_iters: usize,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, seed: u64) -> Self {
        Self {
            method,
            seed,
            kmeans_clusters: None,
            kmeans_max_iters: 100,
        }
    }
}

fn check_budget(budget: usize, n: usize) -> Result<()> {
    if budget > n {
        Err(Error::Budget(format!("budget {budget} exceeds {n} candidates")))
    } else {
        Ok(())
    }
}

/// Uniform sample of `budget` positions out of `n`, without replacement.
pub fn select_random(n: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    check_budget(budget, n)?;
    let mut rng = rng::substream(seed, rng::streams::RANDOM_SELECT);
    Ok(index::sample(&mut rng, n, budget).into_vec())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means with `k = clusters.unwrap_or(budget)`, then the member
/// nearest each centroid.
///
/// Centroids are seeded k-means++ style. If empty clusters leave fewer
/// representatives than `budget`, the rest come from the largest clusters,
/// nearest-to-centroid first, preferring points that do not duplicate an already chosen vector.
pub fn select_kmeans<V: AsRef<[f64]>>(
    features: &[V],
    budget: usize,
    seed: u64,
    clusters: Option<usize>,
    max_iters: usize,
) -> Result<Vec<usize>> {
    let n = features.len();
    check_budget(budget, n)?;
    if budget == 0 {
        return Ok(Vec::new());
    }
    let k = clusters.unwrap_or(budget).min(n);
    if k == 0 {
        return Err(Error::InvalidConfig("kmeans_clusters must be >= 1".into()));
    }
    let points: Vec<&[f64]> = features.iter().map(AsRef::as_ref).collect();

    // k-means++ seeding; duplicates of chosen centroids have weight 0 and are
    // only used once every distinct vector is a centroid.
    let mut rng = rng::substream(seed, rng::streams::KMEANS);
    let mut init: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[init[0]])).collect();
    while init.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            Err(_) => (0..n).find(|i| !init.contains(i)).expect("k <= n"),
        };
        init.push(next);
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| points[i].to_vec()).collect();

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            sums[assign[i]].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assign.iter().enumerate() {
        members[c].push(i);
    }
    // Members of each cluster, nearest to its centroid first (then by index).
    for (c, m) in members.iter_mut().enumerate() {
        m.sort_by(|&a, &b| {
            sq_dist(points[a], &centroids[c])
                .total_cmp(&sq_dist(points[b], &centroids[c]))
                .then(a.cmp(&b))
        });
    }
    let mut by_size: Vec<usize> = (0..k).collect();
    by_size.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));

    let mut picked: Vec<usize> = Vec::with_capacity(budget);
    let mut taken = vec![false; n];
    let reps: Vec<usize> = if k > budget {
        by_size.iter().take(budget).copied().collect()
    } else {
        (0..k).collect()
    };
    for c in reps {
        if let Some(&i) = members[c].first() {
            picked.push(i);
            taken[i] = true;
        }
    }
    for allow_duplicates in [false, true] {
        for &c in &by_size {
            for &i in &members[c] {
                if picked.len() == budget {
                    return Ok(picked);
                }
                if taken[i] || (!allow_duplicates && picked.iter().any(|&p| points[p] == points[i])) {
                    continue;
                }
                picked.push(i);
                taken[i] = true;
            }
        }
    }
    Ok(picked)
}

/// Greedily adds the point that brings the running subset mean closest to
/// the full mean. Ties go to the lowest index.
pub fn select_herding<V: AsRef<[f64]>>(features: &[V], budget: usize) -> Result<Vec<usize>> {
    let n = features.len();
    check_budget(budget, n)?;
    if budget == 0 {
        return Ok(Vec::new());
    }
    let dim = features[0].as_ref().len();
    let mut mean = vec![0.0; dim];
    for f in features {
        mean.iter_mut().zip(f.as_ref()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut sum = vec![0.0; dim];
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(budget);
    for step in 0..budget {
        let size = (step + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (j, f) in features.iter().enumerate().filter(|(j, _)| !taken[*j]) {
            let d: f64 = mean
                .iter()
                .zip(&sum)
                .zip(f.as_ref())
                .map(|((m, s), x)| {
                    let diff = m - (s + x) / size;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, _) = best.expect("budget <= n leaves a candidate");
        taken[j] = true;
        picked.push(j);
        sum.iter_mut().zip(features[j].as_ref()).for_each(|(s, v)| *s += v);
    }
    Ok(picked)
}

fn run_method(vectors: &[&[f64]], budget: usize, cfg: &BaselineConfig, seed: u64) -> Result<Vec<usize>> {
    match cfg.method {
        BaselineMethod::Random => select_random(vectors.len(), budget, seed),
        BaselineMethod::Kmeans => select_kmeans(vectors, budget, seed, cfg.kmeans_clusters, cfg.kmeans_max_iters),
        BaselineMethod::Herding => select_herding(vectors, budget),
    }
}

/// Runs a baseline over the whole feature set (`tau = None`) or per density
/// bucket under the same budgets the greedy selector would get. Per-bucket
/// runs seed bucket `k` with `seed + k`; k-means then uses `n_k` clusters.
pub fn baseline_select(
    features: &FeatureSet,
    alpha: f64,
    tau: Option<usize>,
    cfg: &BaselineConfig,
    source_hash: &str,
) -> Result<SelectionResult> {
    let provenance = Provenance {
        method: cfg.method.name().to_owned(),
        alpha,
        tau,
        seed: cfg.seed,
        source_hash: source_hash.to_owned(),
    };
    match tau {
        None => {
            let budget = partition::total_budget(alpha, features.len())?;
            let vectors: Vec<&[f64]> = features.records.iter().map(|r| r.g.as_slice()).collect();
            let picked = run_method(&vectors, budget, cfg, cfg.seed)?;
            Ok(SelectionResult {
                provenance,
                buckets: vec![BucketSelection {
                    k: 0,
                    ids: picked.into_iter().map(|i| features.records[i].scene_id.clone()).collect(),
                }],
            })
        }
        Some(tau) => {
            let plan = partition::partition(features, tau)?;
            let budgets = partition::dynamic_budget(&plan, alpha)?;
            let per_bucket_cfg = BaselineConfig {
                kmeans_clusters: None,
                ..cfg.clone()
            };
            let selections = plan
                .buckets
                .iter()
                .map(|bucket| {
                    let n_k = budgets.n(bucket.k);
                    if n_k == bucket.len() {
                        return Ok(bucket.ids.clone());
                    }
                    let vectors: Vec<&[f64]> = bucket.members.iter().map(|&i| features.records[i].g.as_slice()).collect();
                    let picked = run_method(&vectors, n_k, &per_bucket_cfg, cfg.seed.wrapping_add(bucket.k as u64))?;
                    Ok(picked.into_iter().map(|i| bucket.ids[i].clone()).collect())
                })
                .collect::<Result<Vec<Vec<String>>>>()?;
            partition::assemble(&plan, &budgets, &selections, provenance)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRecord;
    use std::collections::HashSet;

    fn distinct(v: &[usize]) -> bool {
        v.iter().collect::<HashSet<_>>().len() == v.len()
    }

    #[test]
    fn random_full_budget_and_determinism() {
        let mut all = select_random(7, 7, 1).unwrap();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(select_random(100, 10, 5).unwrap(), select_random(100, 10, 5).unwrap());
        assert_ne!(select_random(100, 10, 5).unwrap(), select_random(100, 10, 6).unwrap());
        assert!(matches!(select_random(3, 4, 0), Err(Error::Budget(_))));
    }

    #[test]
    fn random_inclusion_is_uniform() {
        let mut counts = [0usize; 10];
        for trial in 0..1000 {
            for i in select_random(10, 5, trial).unwrap() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.5).abs() <= 0.05, "inclusion frequency {freq}");
        }
    }

    fn two_clouds() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for i in 0..10 {
            let e = i as f64 * 0.01;
            pts.push(vec![e, -e]);
            pts.push(vec![100.0 + e, 100.0 - e]);
        }
        pts
    }

    #[test]
    fn kmeans_picks_one_per_cloud() {
        let pts = two_clouds();
        for seed in 0..10 {
            let picked = select_kmeans(&pts, 2, seed, None, 100).unwrap();
            assert_eq!(picked.len(), 2);
            let near_origin = picked.iter().filter(|&&i| pts[i][0] < 50.0).count();
            assert_eq!(near_origin, 1, "seed {seed} picked {picked:?}");
        }
    }

    #[test]
    fn kmeans_full_budget() {
        let pts = two_clouds();
        let mut all = select_kmeans(&pts, pts.len(), 3, None, 100).unwrap();
        all.sort();
        assert_eq!(all, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_avoids_copies_on_duplicated_data() {
        let base: Vec<Vec<f64>> = (0..6).map(|i| vec![(i * 7 % 5) as f64 * 3.0, i as f64]).collect();
        let pts: Vec<Vec<f64>> = base.iter().chain(base.iter()).cloned().collect();
        for budget in 1..=6 {
            for seed in 0..5 {
                let picked = select_kmeans(&pts, budget, seed, None, 100).unwrap();
                assert_eq!(picked.len(), budget);
                assert!(distinct(&picked));
                let vectors: HashSet<Vec<u64>> =
                    picked.iter().map(|&i| pts[i].iter().map(|v| v.to_bits()).collect()).collect();
                assert_eq!(vectors.len(), budget, "budget {budget} seed {seed} picked copies: {picked:?}");
            }
        }
    }

    #[test]
    fn herding_hand_cases() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]];
        assert_eq!(select_herding(&pts, 1).unwrap(), vec![2]);
        let mut all = select_herding(&pts, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let same = vec![vec![2.0, 2.0]; 6];
        assert_eq!(select_herding(&same, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(select_herding(&same, 7), Err(Error::Budget(_))));
    }

    fn feature_set(n: usize) -> FeatureSet {
        FeatureSet::new(
            2,
            (0..n)
                .map(|i| FeatureRecord {
                    scene_id: format!("s{i}"),
                    density: if i % 5 == 0 { 45 } else { 2 + i % 7 },
                    g: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn baselines_return_budget_sized_unique_subsets() {
        let fs = feature_set(60);
        let ids: HashSet<&str> = fs.ids().collect();
        for method in [BaselineMethod::Random, BaselineMethod::Kmeans, BaselineMethod::Herding] {
            let cfg = BaselineConfig::new(method, 3);
            for tau in [None, Some(10)] {
                let sel = baseline_select(&fs, 0.4, tau, &cfg, "").unwrap();
                let got: Vec<&str> = sel.ids().collect();
                assert_eq!(got.len(), 24, "{method} tau {tau:?}");
                assert_eq!(got.iter().collect::<HashSet<_>>().len(), 24);
                assert!(got.iter().all(|id| ids.contains(id)));
            }
            let full = baseline_select(&fs, 1.0, None, &cfg, "").unwrap();
            assert_eq!(full.len(), 60);
        }
    }

    #[test]
    fn per_bucket_baselines_match_greedy_sizes() {
        let fs = feature_set(60);
        let greedy = crate::select::sstp_select(
            &fs,
            &crate::select::SstpConfig {
                alpha: 0.3,
                ..Default::default()
            },
            "",
        )
        .unwrap();
        for method in [BaselineMethod::Random, BaselineMethod::Kmeans, BaselineMethod::Herding] {
            let sel = baseline_select(&fs, 0.3, Some(10), &BaselineConfig::new(method, 0), "").unwrap();
            let sizes = |s: &SelectionResult| s.buckets.iter().map(|b| (b.k, b.ids.len())).collect::<Vec<_>>();
            assert_eq!(sizes(&sel), sizes(&greedy));
        }
    }

    #[test]
    fn method_names_parse() {
        for m in [BaselineMethod::Random, BaselineMethod::Kmeans, BaselineMethod::Herding] {
            assert_eq!(m.name().parse::<BaselineMethod>().unwrap(), m);
        }
        assert!("sstp".parse::<BaselineMethod>().is_err());
    }
}
