//! Displacement metrics, density-stratified evaluation and paired training runs.
//!
//! Metrics are computed on the focal agent of every scene:
//! minADE (best mode by mean displacement), minFDE (best mode by final
//! displacement) and miss rate (share of scenes whose minFDE exceeds a
//! threshold, 2 m by default).
//!
//! Reports serialize as `key=value` lines:
//!
//! ```text
//! #REPORT v1 mr_threshold=2 mr_threshold_source=convention
//! #ARM sstp
//! count=2000
//! minADE=0.81
//! minFDE=1.52
//! MR=0.18
//! epochs=20
//! lr=0.01
//! seed=0
//! subset_size=5000
//! #STRATUM label=<40 lo=0 hi=inf
//! count=1800
//! minADE=...
//! ```
//!
//! Training keys are present only for arms that trained a model.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array3, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::predictor::{self, PredictorConfig, ToyPredictorParams};
use crate::rng;
use crate::scene::{Dataset, Point};

/// Miss threshold in meters. Not fixed by the method itself; this is the
/// Argoverse convention and reports say so.
pub const DEFAULT_MR_THRESHOLD: f64 = 2.0;

pub fn min_ade(modes: &Array3<f64>, gt: &[Point]) -> f64 {
    predictor::mode_ade(modes, gt).into_iter().fold(f64::INFINITY, f64::min)
}

pub fn min_fde(modes: &Array3<f64>, gt: &[Point]) -> f64 {
    let last = gt.len() - 1;
    let y = gt[last];
    modes
        .outer_iter()
        .map(|m| {
            let p = m.index_axis(Axis(0), last);
            (p[0] - y[0]).hypot(p[1] - y[1])
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn miss_rate_indicator(modes: &Array3<f64>, gt: &[Point], threshold: f64) -> u8 {
    u8::from(min_fde(modes, gt) > threshold)
}

/// Half-open density range `[lo, hi)`; `hi = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stratum {
    pub label: String,
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Stratum {
    pub fn new(label: impl Into<String>, lo: usize, hi: Option<usize>) -> Self {
        Self {
            label: label.into(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, density: usize) -> bool {
        density >= self.lo && self.hi.is_none_or(|h| density < h)
    }
}

/// Scene-count thresholds used for the density comparison table:
/// `<40`, `>=40`, `>=60`, `>=80`. The upper three overlap.
pub fn table_strata() -> Vec<Stratum> {
    vec![
        Stratum::new("<40", 0, Some(40)),
        Stratum::new(">=40", 40, None),
        Stratum::new(">=60", 60, None),
        Stratum::new(">=80", 80, None),
    ]
}

/// Disjoint bands covering every density.
pub fn disjoint_bands() -> Vec<Stratum> {
    vec![
        Stratum::new("<40", 0, Some(40)),
        Stratum::new("40-59", 40, Some(60)),
        Stratum::new("60-79", 60, Some(80)),
        Stratum::new(">=80", 80, None),
    ]
}

/// The table strata followed by the two inner disjoint bands.
pub fn default_strata() -> Vec<Stratum> {
    let mut s = table_strata();
    s.extend(disjoint_bands().into_iter().filter(|b| b.lo == 40 || b.lo == 60));
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub count: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumMetrics {
    pub stratum: Stratum,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub subset_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub overall: Metrics,
    /// Strata in request order; empty strata report zero metrics.
    pub per_stratum: Vec<StratumMetrics>,
    pub training: Option<TrainingMeta>,
}

impl MetricReport {
    pub fn stratum(&self, label: &str) -> Option<&Metrics> {
        self.per_stratum.iter().find(|s| s.stratum.label == label).map(|s| &s.metrics)
    }
}

#[derive(Debug, Clone, Copy)]
struct SceneScore {
    density: usize,
    ade: f64,
    fde: f64,
    miss: u8,
}

fn aggregate<'a>(scores: impl Iterator<Item = &'a SceneScore>) -> Metrics {
    let mut m = Metrics::default();
    let (mut ade, mut fde, mut miss) = (0.0, 0.0, 0usize);
    for s in scores {
        m.count += 1;
        ade += s.ade;
        fde += s.fde;
        miss += s.miss as usize;
    }
    if m.count > 0 {
        let n = m.count as f64;
        m.min_ade = ade / n;
        m.min_fde = fde / n;
        m.mr = miss as f64 / n;
    }
    m
}

/// Scores `params` on every scene of `eval_set`. Strata that leave some
/// density uncovered get an extra `other` stratum for those scenes.
pub fn evaluate(
    params: &ToyPredictorParams,
    eval_set: &Dataset,
    strata: &[Stratum],
    mr_threshold: f64,
) -> Result<MetricReport> {
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if !(mr_threshold > 0.0 && mr_threshold.is_finite()) {
        return Err(Error::InvalidConfig(format!("miss threshold must be positive and finite, got {mr_threshold}")));
    }
    params.check_horizons(eval_set.t_obs, eval_set.t_pred)?;
    let scores = eval_set
        .scenes
        .par_iter()
        .map(|s| {
            let out = predictor::predict(params, s)?;
            let gt = &s.focal().future;
            Ok(SceneScore {
                density: s.density(),
                ade: min_ade(&out.trajectories, gt),
                fde: min_fde(&out.trajectories, gt),
                miss: miss_rate_indicator(&out.trajectories, gt, mr_threshold),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_stratum: Vec<StratumMetrics> = strata
        .iter()
        .map(|st| StratumMetrics {
            stratum: st.clone(),
            metrics: aggregate(scores.iter().filter(|s| st.contains(s.density))),
        })
        .collect();
    let uncovered: Vec<&SceneScore> = scores
        .iter()
        .filter(|s| !strata.iter().any(|st| st.contains(s.density)))
        .collect();
    if let Some(lo) = uncovered.iter().map(|s| s.density).min() {
        per_stratum.push(StratumMetrics {
            stratum: Stratum::new("other", lo, None),
            metrics: aggregate(uncovered.into_iter()),
        });
    }
    Ok(MetricReport {
        overall: aggregate(scores.iter()),
        per_stratum,
        training: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub predictor: Option<PredictorConfig>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub include_full: bool,
    pub strata: Vec<Stratum>,
    pub mr_threshold: f64,
    /// Name of the arm trained on the given subset.
    pub subset_label: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            predictor: None,
            epochs: 5,
            lr: 1e-2,
            seed: 0,
            include_full: false,
            strata: default_strata(),
            mr_threshold: DEFAULT_MR_THRESHOLD,
            subset_label: "subset".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mr_threshold: f64,
    pub arms: Vec<(String, MetricReport)>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&MetricReport> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#REPORT v1 mr_threshold={} mr_threshold_source=convention\n",
            self.mr_threshold
        );
        for (name, r) in &self.arms {
            let _ = writeln!(out, "#ARM {name}");
            write_metrics(&mut out, &r.overall);
            if let Some(t) = &r.training {
                let _ = writeln!(out, "epochs={}", t.epochs);
                let _ = writeln!(out, "lr={}", t.lr);
                let _ = writeln!(out, "seed={}", t.seed);
                let _ = writeln!(out, "subset_size={}", t.subset_size);
            }
            for s in &r.per_stratum {
                let hi = s.stratum.hi.map_or_else(|| "inf".to_owned(), |h| h.to_string());
                let _ = writeln!(out, "#STRATUM label={} lo={} hi={hi}", s.stratum.label, s.stratum.lo);
                write_metrics(&mut out, &s.metrics);
            }
        }
        out
    }

    /// Delimiter-separated table, one row per arm and stratum (`all` for overall).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,stratum,lo,hi,count,minADE,minFDE,MR\n");
        for (name, r) in &self.arms {
            let row = |out: &mut String, label: &str, lo: &str, hi: &str, m: &Metrics| {
                let _ = writeln!(out, "{name},{label},{lo},{hi},{},{},{},{}", m.count, m.min_ade, m.min_fde, m.mr);
            };
            row(&mut out, "all", "0", "inf", &r.overall);
            for s in &r.per_stratum {
                let hi = s.stratum.hi.map_or_else(|| "inf".to_owned(), |h| h.to_string());
                row(&mut out, &s.stratum.label, &s.stratum.lo.to_string(), &hi, &s.metrics);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty report".into()))?;
        let fields = header
            .strip_prefix("#REPORT v1")
            .ok_or_else(|| perr(1, "missing `#REPORT v1` header".into()))?;
        let mr_threshold = fields
            .split_whitespace()
            .find_map(|t| t.strip_prefix("mr_threshold="))
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| perr(1, "header lacks mr_threshold".into()))?;

        enum Target {
            None,
            Overall,
            Stratum,
        }
        let mut arms: Vec<(String, MetricReport)> = Vec::new();
        let mut target = Target::None;
        let mut training: Option<TrainingMeta> = None;
        for (lineno, line) in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix("#ARM ") {
                arms.push((
                    name.to_owned(),
                    MetricReport {
                        overall: Metrics::default(),
                        per_stratum: Vec::new(),
                        training: None,
                    },
                ));
                training = None;
                target = Target::Overall;
                continue;
            }
            let (_, report) = arms
                .last_mut()
                .ok_or_else(|| perr(lineno, "content before first #ARM".into()))?;
            if let Some(rest) = line.strip_prefix("#STRATUM ") {
                let mut label = None;
                let mut lo = None;
                let mut hi = None;
                for tok in rest.split_whitespace() {
                    match tok.split_once('=') {
                        Some(("label", v)) => label = Some(v.to_owned()),
                        Some(("lo", v)) => lo = v.parse::<usize>().ok(),
                        Some(("hi", "inf")) => hi = Some(None),
                        Some(("hi", v)) => hi = v.parse::<usize>().ok().map(Some),
                        _ => return Err(perr(lineno, format!("bad stratum field `{tok}`"))),
                    }
                }
                match (label, lo, hi) {
                    (Some(label), Some(lo), Some(hi)) => report.per_stratum.push(StratumMetrics {
                        stratum: Stratum { label, lo, hi },
                        metrics: Metrics::default(),
                    }),
                    _ => return Err(perr(lineno, "stratum needs label, lo and hi".into())),
                }
                target = Target::Stratum;
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| perr(lineno, format!("expected key=value, got `{line}`")))?;
            let num = || val.parse::<f64>().map_err(|_| perr(lineno, format!("bad number `{val}`")));
            let int = || val.parse::<u64>().map_err(|_| perr(lineno, format!("bad integer `{val}`")));
            let metrics = match target {
                Target::Overall => &mut report.overall,
                Target::Stratum => &mut report.per_stratum.last_mut().expect("stratum opened").metrics,
                Target::None => unreachable!("arm exists"),
            };
            match (key, &target) {
                ("count", _) => metrics.count = int()? as usize,
                ("minADE", _) => metrics.min_ade = num()?,
                ("minFDE", _) => metrics.min_fde = num()?,
                ("MR", _) => metrics.mr = num()?,
                ("epochs" | "lr" | "seed" | "subset_size", Target::Overall) => {
                    let t = training.get_or_insert(TrainingMeta {
                        epochs: 0,
                        lr: 0.0,
                        seed: 0,
                        subset_size: 0,
                    });
                    match key {
                        "epochs" => t.epochs = int()? as usize,
                        "lr" => t.lr = num()?,
                        "seed" => t.seed = int()?,
                        _ => t.subset_size = int()? as usize,
                    }
                    report.training = training.clone();
                }
                _ => return Err(perr(lineno, format!("unexpected key `{key}`"))),
            }
        }
        Ok(Self { mr_threshold, arms })
    }
}

fn write_metrics(out: &mut String, m: &Metrics) {
    let _ = writeln!(out, "count={}", m.count);
    let _ = writeln!(out, "minADE={}", m.min_ade);
    let _ = writeln!(out, "minFDE={}", m.min_fde);
    let _ = writeln!(out, "MR={}", m.mr);
}

pub fn write_report(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))
}

/// A single evaluation wrapped as a one-arm report.
pub fn single_arm(name: &str, report: MetricReport, mr_threshold: f64) -> ExperimentReport {
    ExperimentReport {
        mr_threshold,
        arms: vec![(name.to_owned(), report)],
    }
}

/// Trains and scores a fresh predictor on `train`.
pub fn train_and_evaluate(train: &Dataset, eval_set: &Dataset, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let pcfg = cfg.predictor.unwrap_or_else(|| PredictorConfig::for_dataset(train));
    let init = ToyPredictorParams::init(&pcfg, cfg.seed)?;
    let trained = predictor::pretrain(&init, train, cfg.epochs, cfg.lr, cfg.seed)?;
    let mut report = evaluate(&trained, eval_set, &cfg.strata, cfg.mr_threshold)?;
    report.training = Some(TrainingMeta {
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed: cfg.seed,
        subset_size: train.len(),
    });
    Ok(report)
}

/// Trains one model on `subset_ids`, one on a same-size uniform random
/// subset of `full`, and optionally one on `full`, all from the same seeded
/// initialization, and evaluates each on `eval_set`.
pub fn run_experiment<S: AsRef<str>>(
    full: &Dataset,
    subset_ids: &[S],
    eval_set: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    let subset = full.subset(subset_ids)?;
    if subset.is_empty() {
        return Err(Error::Empty("training subset"));
    }
    let mut rng = rng::substream(cfg.seed, rng::streams::RANDOM_ARM);
    let mut random_idx = rand::seq::index::sample(&mut rng, full.len(), subset.len()).into_vec();
    random_idx.sort_unstable();
    let random = Dataset {
        scenes: random_idx.iter().map(|&i| full.scenes[i].clone()).collect(),
        t_obs: full.t_obs,
        t_pred: full.t_pred,
    };

    let mut train_sets: Vec<(String, &Dataset)> = vec![(cfg.subset_label.clone(), &subset), ("random".into(), &random)];
    if cfg.include_full {
        train_sets.push(("full".into(), full));
    }
    let arms = train_sets
        .into_par_iter()
        .map(|(name, ds)| Ok((name, train_and_evaluate(ds, eval_set, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        mr_threshold: cfg.mr_threshold,
        arms,
    })
}
