//! Density buckets, per-bucket budgets and the selection file.
//!
//! Scenes are split into `K` half-open density ranges of width `tau` starting
//! at the minimum density. The total budget `B = floor(alpha * N)` is handed
//! out densest bucket first: bucket `k` receives `min(|D_k|, floor(B / k))`
//! and the remaining budget shrinks by that amount before bucket `k - 1` is
//! considered. Empty ranges are kept so that `k` always means the same range.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureSet;

pub const DEFAULT_TAU: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    /// 1-based bucket index.
    pub k: usize,
    /// Inclusive lower density bound.
    pub lo: usize,
    /// Exclusive upper density bound.
    pub hi: usize,
    /// Positions of the members in the partitioned input, ascending.
    pub members: Vec<usize>,
    pub ids: Vec<String>,
}

impl Bucket {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub tau: usize,
    pub rho_min: usize,
    /// `buckets[k - 1]` is bucket `k`.
    pub buckets: Vec<Bucket>,
}

impl PartitionPlan {
    /// Partitions `(scene_id, density)` pairs.
    pub fn from_densities<'a>(items: impl IntoIterator<Item = (&'a str, usize)>, tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(Error::InvalidConfig("tau must be >= 1".into()));
        }
        let items: Vec<(&str, usize)> = items.into_iter().collect();
        let rho_min = items.iter().map(|&(_, d)| d).min().ok_or(Error::Empty("feature set"))?;
        let rho_max = items.iter().map(|&(_, d)| d).max().expect("non-empty");
        let k_count = (rho_max - rho_min + 1).div_ceil(tau);
        let mut buckets: Vec<Bucket> = (1..=k_count)
            .map(|k| Bucket {
                k,
                lo: rho_min + (k - 1) * tau,
                hi: rho_min + k * tau,
                members: Vec::new(),
                ids: Vec::new(),
            })
            .collect();
        for (pos, &(id, density)) in items.iter().enumerate() {
            let b = &mut buckets[(density - rho_min) / tau];
            b.members.push(pos);
            b.ids.push(id.to_owned());
        }
        Ok(Self { tau, rho_min, buckets })
    }

    pub fn k(&self) -> usize {
        self.buckets.len()
    }

    pub fn total(&self) -> usize {
        self.buckets.iter().map(Bucket::len).sum()
    }

    pub fn bucket(&self, k: usize) -> Option<&Bucket> {
        k.checked_sub(1).and_then(|i| self.buckets.get(i))
    }
}

pub fn partition(features: &FeatureSet, tau: usize) -> Result<PartitionPlan> {
    PartitionPlan::from_densities(features.records.iter().map(|r| (r.scene_id.as_str(), r.density)), tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub alpha: f64,
    /// Total budget `floor(alpha * N)`.
    pub total: usize,
    /// `(k, n_k)` in ascending `k`.
    pub per_bucket: Vec<(usize, usize)>,
}

impl BudgetPlan {
    pub fn n(&self, k: usize) -> usize {
        self.per_bucket.iter().find(|(kk, _)| *kk == k).map_or(0, |&(_, n)| n)
    }

    pub fn allocated(&self) -> usize {
        self.per_bucket.iter().map(|&(_, n)| n).sum()
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// `floor(alpha * n)`.
pub fn total_budget(alpha: f64, n: usize) -> Result<usize> {
    validate_alpha(alpha)?;
    Ok((alpha * n as f64).floor() as usize)
}

pub fn dynamic_budget(plan: &PartitionPlan, alpha: f64) -> Result<BudgetPlan> {
    let total = total_budget(alpha, plan.total())?;
    let mut per_bucket = vec![(0, 0); plan.k()];
    if total == plan.total() {
        // The reverse-order rule can leave budget unused even when it covers
        // every scene; a full budget keeps every scene.
        for bucket in &plan.buckets {
            per_bucket[bucket.k - 1] = (bucket.k, bucket.len());
        }
        return Ok(BudgetPlan {
            alpha,
            total,
            per_bucket,
        });
    }
    let mut remaining = total;
    for bucket in plan.buckets.iter().rev() {
        let share = remaining / bucket.k;
        let n_k = if bucket.len() <= share { bucket.len() } else { share };
        remaining -= n_k;
        per_bucket[bucket.k - 1] = (bucket.k, n_k);
    }
    Ok(BudgetPlan {
        alpha,
        total,
        per_bucket,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub method: String,
    pub alpha: f64,
    /// `None` for selections made without density partitioning.
    pub tau: Option<usize>,
    pub seed: u64,
    /// Hash of the features (or params) the selection was computed from.
    pub source_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketSelection {
    /// Bucket index; 0 marks an unpartitioned selection.
    pub k: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub provenance: Provenance,
    /// In processing order (densest bucket first).
    pub buckets: Vec<BucketSelection>,
}

impl SelectionResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.buckets.iter().flat_map(|b| b.ids.iter().map(String::as_str))
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(|b| b.ids.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_text(&self) -> String {
        let p = &self.provenance;
        let tau = p.tau.map_or_else(|| "none".to_owned(), |t| t.to_string());
        let sizes: Vec<String> = self.buckets.iter().map(|b| format!("{}:{}", b.k, b.ids.len())).collect();
        let mut out = format!(
            "#META method={} alpha={} tau={} seed={} source={} buckets={}\n",
            p.method,
            p.alpha,
            tau,
            p.seed,
            if p.source_hash.is_empty() { "-" } else { &p.source_hash },
            if sizes.is_empty() { "-".to_owned() } else { sizes.join(",") }
        );
        for id in self.ids() {
            let _ = writeln!(out, "{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "missing #META header"))?;
        let fields = header.strip_prefix("#META ").ok_or_else(|| perr(1, "missing #META header"))?;
        let mut method = None;
        let mut alpha = None;
        let mut tau = None;
        let mut seed = None;
        let mut source = None;
        let mut sizes = None;
        for tok in fields.split_whitespace() {
            let (key, val) = tok.split_once('=').ok_or_else(|| perr(1, format!("bad field `{tok}`")))?;
            match key {
                "method" => method = Some(val.to_owned()),
                "alpha" => alpha = Some(val.parse::<f64>().map_err(|_| perr(1, "bad alpha"))?),
                "tau" => {
                    tau = Some(if val == "none" {
                        None
                    } else {
                        Some(val.parse::<usize>().map_err(|_| perr(1, "bad tau"))?)
                    })
                }
                "seed" => seed = Some(val.parse::<u64>().map_err(|_| perr(1, "bad seed"))?),
                "source" => source = Some(if val == "-" { String::new() } else { val.to_owned() }),
                "buckets" => {
                    let parsed = if val == "-" {
                        Vec::new()
                    } else {
                        val.split(',')
                            .map(|kv| {
                                let (k, n) = kv.split_once(':')?;
                                Some((k.parse::<usize>().ok()?, n.parse::<usize>().ok()?))
                            })
                            .collect::<Option<Vec<_>>>()
                            .ok_or_else(|| perr(1, "bad bucket sizes"))?
                    };
                    sizes = Some(parsed);
                }
                _ => return Err(perr(1, format!("unknown field `{key}`"))),
            }
        }
        let missing = |f: &str| perr(1, format!("#META lacks `{f}`"));
        let provenance = Provenance {
            method: method.ok_or_else(|| missing("method"))?,
            alpha: alpha.ok_or_else(|| missing("alpha"))?,
            tau: tau.ok_or_else(|| missing("tau"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            source_hash: source.ok_or_else(|| missing("source"))?,
        };
        let sizes = sizes.ok_or_else(|| missing("buckets"))?;
        let ids: Vec<String> = lines.filter(|l| !l.is_empty()).map(str::to_owned).collect();
        let declared: usize = sizes.iter().map(|&(_, n)| n).sum();
        if declared != ids.len() {
            return Err(Error::Format(format!(
                "selection header declares {declared} ids but file lists {}",
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let mut rest = ids.into_iter();
        let buckets = sizes
            .into_iter()
            .map(|(k, n)| BucketSelection {
                k,
                ids: rest.by_ref().take(n).collect(),
            })
            .collect();
        Ok(Self { provenance, buckets })
    }
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn write_selection(sel: &SelectionResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sel.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<SelectionResult> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SelectionResult::from_text(&text)
}

/// Joins per-bucket selections, checking each against its quota and bucket.
///
/// `selections[k - 1]` holds the ids chosen from bucket `k`. Each must contain
/// exactly `n_k` distinct members of that bucket. The result lists buckets
/// densest first.
pub fn assemble(
    plan: &PartitionPlan,
    budgets: &BudgetPlan,
    selections: &[Vec<String>],
    provenance: Provenance,
) -> Result<SelectionResult> {
    if selections.len() != plan.k() {
        return Err(Error::Budget(format!(
            "got selections for {} buckets, plan has {}",
            selections.len(),
            plan.k()
        )));
    }
    let mut buckets = Vec::with_capacity(plan.k());
    for bucket in plan.buckets.iter().rev() {
        let chosen = &selections[bucket.k - 1];
        let n_k = budgets.n(bucket.k);
        if chosen.len() != n_k {
            return Err(Error::Budget(format!(
                "bucket {} selected {} scenes, budget is {n_k}",
                bucket.k,
                chosen.len()
            )));
        }
        let members: HashSet<&str> = bucket.ids.iter().map(String::as_str).collect();
        let mut seen = HashSet::with_capacity(chosen.len());
        for id in chosen {
            if !members.contains(id.as_str()) {
                return Err(Error::Membership(format!("scene `{id}` is not in bucket {}", bucket.k)));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Membership(format!("scene `{id}` selected twice in bucket {}", bucket.k)));
            }
        }
        buckets.push(BucketSelection {
            k: bucket.k,
            ids: chosen.clone(),
        });
    }
    Ok(SelectionResult { provenance, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plan_of(densities: &[usize], tau: usize) -> PartitionPlan {
        let ids: Vec<String> = (0..densities.len()).map(|i| format!("s{i}")).collect();
        PartitionPlan::from_densities(ids.iter().map(String::as_str).zip(densities.iter().copied()), tau).unwrap()
    }

    /// A plan whose bucket `k` (1-based) holds `sizes[k - 1]` scenes.
    /// The first and last sizes must be nonzero.
    fn plan_with_sizes(sizes: &[usize], tau: usize) -> PartitionPlan {
        let densities: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat_n(1 + i * tau, n))
            .collect();
        plan_of(&densities, tau)
    }

    fn prov() -> Provenance {
        Provenance {
            method: "sstp".into(),
            alpha: 0.5,
            tau: Some(10),
            seed: 0,
            source_hash: String::new(),
        }
    }

    #[test]
    fn single_bucket() {
        let p = plan_of(&[3, 3, 3], 5);
        assert_eq!(p.k(), 1);
        assert_eq!(p.buckets[0].members, vec![0, 1, 2]);
    }

    #[test]
    fn three_buckets_of_one() {
        let p = plan_of(&[2, 7, 12], 5);
        assert_eq!(p.rho_min, 2);
        let ranges: Vec<_> = p.buckets.iter().map(|b| (b.lo, b.hi, b.ids.clone())).collect();
        assert_eq!(
            ranges,
            vec![
                (2, 7, vec!["s0".to_owned()]),
                (7, 12, vec!["s1".to_owned()]),
                (12, 17, vec!["s2".to_owned()])
            ]
        );
    }

    #[test]
    fn wide_tau_gives_one_bucket_and_gaps_are_kept() {
        assert_eq!(plan_of(&[4, 9, 13], 10).k(), 1);
        let gappy = plan_of(&[2, 50], 10);
        assert_eq!(gappy.k(), 5);
        assert!(gappy.buckets[1..4].iter().all(Bucket::is_empty));
        assert_eq!(gappy.buckets[4].ids, vec!["s1".to_owned()]);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(PartitionPlan::from_densities(Vec::new(), 5), Err(Error::Empty(_))));
        assert!(matches!(plan_of_result(&[1], 0), Err(Error::InvalidConfig(_))));
    }

    fn plan_of_result(d: &[usize], tau: usize) -> Result<PartitionPlan> {
        PartitionPlan::from_densities(d.iter().map(|&x| ("x", x)), tau)
    }

    #[test]
    fn full_alpha_keeps_everything() {
        let p = plan_with_sizes(&[7, 0, 3, 11], 5);
        let b = dynamic_budget(&p, 1.0).unwrap();
        assert_eq!(b.per_bucket, vec![(1, 7), (2, 0), (3, 3), (4, 11)]);
    }

    #[test]
    fn hand_trace_budget_100() {
        let p = plan_with_sizes(&[100, 50, 10], 5);
        let b = dynamic_budget(&p, 0.625).unwrap();
        assert_eq!(b.total, 100);
        assert_eq!(b.per_bucket, vec![(1, 45), (2, 45), (3, 10)]);
        assert_eq!(b.allocated(), 100);
    }

    #[test]
    fn hand_trace_budget_10() {
        let p = plan_with_sizes(&[1000, 1000, 1000], 5);
        let b = dynamic_budget(&p, 10.0 / 3000.0).unwrap();
        assert_eq!(b.total, 10);
        assert_eq!(b.per_bucket, vec![(1, 4), (2, 3), (3, 3)]);
    }

    #[test]
    fn alpha_out_of_range() {
        let p = plan_with_sizes(&[3], 5);
        for a in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(dynamic_budget(&p, a), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn assemble_contracts() {
        let p = plan_of(&[1, 1, 20], 10);
        let budgets = dynamic_budget(&p, 1.0).unwrap();
        let all = assemble(&p, &budgets, &[vec!["s0".into(), "s1".into()], vec!["s2".into()]], prov()).unwrap();
        let mut ids: Vec<_> = all.ids().collect();
        ids.sort();
        assert_eq!(ids, vec!["s0", "s1", "s2"]);

        let two = plan_of(&[1, 20], 10);
        let b2 = dynamic_budget(&two, 1.0).unwrap();
        let r = assemble(&two, &b2, &[vec!["s0".into()], vec!["s1".into()]], prov()).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["s1", "s0"]);
        assert_eq!(r.buckets.iter().map(|b| (b.k, b.ids.len())).collect::<Vec<_>>(), vec![(2, 1), (1, 1)]);

        let over = assemble(&p, &budgets, &[vec!["s0".into(), "s1".into(), "s2".into()], vec!["s2".into()]], prov());
        assert!(matches!(over, Err(Error::Budget(_))));
        let wrong = assemble(&p, &budgets, &[vec!["s0".into(), "s2".into()], vec!["s2".into()]], prov());
        assert!(matches!(wrong, Err(Error::Membership(_))));
        let dup = assemble(&p, &budgets, &[vec!["s0".into(), "s0".into()], vec!["s2".into()]], prov());
        assert!(matches!(dup, Err(Error::Membership(_))));
    }

    #[test]
    fn selection_file_round_trip() {
        let sel = SelectionResult {
            provenance: Provenance {
                source_hash: "abc123".into(),
                ..prov()
            },
            buckets: vec![
                BucketSelection {
                    k: 2,
                    ids: vec!["x".into()],
                },
                BucketSelection {
                    k: 1,
                    ids: vec!["y".into(), "z".into()],
                },
            ],
        };
        let text = sel.to_text();
        assert_eq!(
            text,
            "#META method=sstp alpha=0.5 tau=10 seed=0 source=abc123 buckets=2:1,1:2\nx\ny\nz\n"
        );
        assert_eq!(SelectionResult::from_text(&text).unwrap(), sel);

        let global = SelectionResult {
            provenance: Provenance { tau: None, ..prov() },
            buckets: vec![BucketSelection { k: 0, ids: vec![] }],
        };
        assert_eq!(SelectionResult::from_text(&global.to_text()).unwrap(), global);
        assert!(SelectionResult::from_text("x\n").is_err());
        assert!(SelectionResult::from_text("#META method=a alpha=1 tau=none seed=0 source=- buckets=0:2\nx\n").is_err());
    }

    fn arb_sizes() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(0usize..200, 1..10).prop_map(|mut v| {
            let last = v.len() - 1;
            v[0] = v[0].max(1);
            v[last] = v[last].max(1);
            v
        })
    }

    proptest! {
        #[test]
        fn buckets_partition_the_records(
            densities in prop::collection::vec(1usize..120, 1..300),
            tau in 1usize..25,
        ) {
            let plan = plan_of(&densities, tau);
            let mut seen = vec![0; densities.len()];
            for b in &plan.buckets {
                for &m in &b.members {
                    seen[m] += 1;
                    prop_assert!(b.lo <= densities[m] && densities[m] < b.hi);
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            prop_assert_eq!(plan.total(), densities.len());
        }

        #[test]
        fn budget_never_overspends(sizes in arb_sizes(), alpha in 0.001f64..=1.0) {
            let plan = plan_with_sizes(&sizes, 5);
            let b = dynamic_budget(&plan, alpha).unwrap();
            prop_assert!(b.allocated() <= b.total);
            if sizes[0] >= b.total {
                prop_assert_eq!(b.allocated(), b.total);
            }
            let mut remaining = b.total;
            for &(k, n) in b.per_bucket.iter().rev() {
                prop_assert!(n <= sizes[k - 1]);
                if b.total < plan.total() {
                    prop_assert!(n <= remaining / k);
                }
                remaining -= n;
            }
        }

        /// When the dense buckets are small enough that each fits its quota
        /// (`(K + 1)·|dense| + K <= B` is sufficient), every dense scene is kept
        /// and the dense share can only grow.
        #[test]
        fn budget_does_not_dilute_small_dense_buckets(
            head in 200usize..3000,
            tail in prop::collection::vec(0usize..15, 1..6),
            alpha in 0.05f64..=1.0,
        ) {
            let mut sizes = vec![head];
            sizes.extend(&tail);
            let last = sizes.len() - 1;
            sizes[last] = sizes[last].max(1);
            let plan = plan_with_sizes(&sizes, 5);
            let b = dynamic_budget(&plan, alpha).unwrap();
            let dense = plan.total() - sizes[0];
            prop_assume!((plan.k() + 1) * dense + plan.k() <= b.total);
            let dense_share = dense as f64 / plan.total() as f64;
            let picked_dense: usize = b.per_bucket.iter().filter(|&&(k, _)| k >= 2).map(|&(_, n)| n).sum();
            prop_assert!(picked_dense as f64 / b.allocated() as f64 >= dense_share - 1e-12);
        }
    }
}
