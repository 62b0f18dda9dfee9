//! Seeds x folds comparison of the hybrid model against a plain siamese
//! baseline, reported as a per-seed MAP table with an improvement row.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{kfold_split, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::evaluate_fold;
use crate::trainer::{train, Schedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Style weight forced to zero.
    Baseline,
    /// The configured loss weights.
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub fold: usize,
    pub variant: Variant,
    pub schedule: String,
    pub map_normalized: f64,
    pub final_mean_total: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    /// Every variant is trained under each schedule; the best one per
    /// variant (by mean MAP over all seeds and folds) is reported.
    pub schedules: Vec<Schedule>,
    /// Worker threads for independent runs. Results do not depend on it.
    pub jobs: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            schedules: Schedule::defaults().to_vec(),
            jobs: 1,
        }
    }
}

/// Percentage change of `hybrid` over `baseline`.
pub fn improvement_pct(baseline: f64, hybrid: f64) -> f64 {
    100.0 * (hybrid - baseline) / baseline
}

pub fn format_improvement(pct: f64) -> String {
    format!("{pct:+.2}%")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub seeds: Vec<u64>,
    /// Mean MAP over folds, one entry per seed.
    pub baseline: Vec<f64>,
    pub hybrid: Vec<f64>,
    pub baseline_schedule: String,
    pub hybrid_schedule: String,
    pub runs: Vec<RunRecord>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ResultsTable {
    /// Builds the table from explicit per-seed means.
    pub fn from_means(seeds: Vec<u64>, baseline: Vec<f64>, hybrid: Vec<f64>) -> Self {
        Self {
            seeds,
            baseline,
            hybrid,
            baseline_schedule: String::new(),
            hybrid_schedule: String::new(),
            runs: Vec::new(),
        }
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }

    pub fn hybrid_mean(&self) -> f64 {
        mean(&self.hybrid)
    }

    /// Per-seed improvements followed by the improvement of the means.
    pub fn improvements(&self) -> Vec<f64> {
        self.baseline
            .iter()
            .zip(&self.hybrid)
            .map(|(b, h)| improvement_pct(*b, *h))
            .chain([improvement_pct(self.baseline_mean(), self.hybrid_mean())])
            .collect()
    }

    /// Row labels and cells, the seed columns then a mean column.
    pub fn rows(&self) -> Vec<(String, Vec<String>)> {
        let fmt_row = |v: &[f64], m: f64| {
            v.iter().chain([&m]).map(|x| format!("{x:.4}")).collect::<Vec<_>>()
        };
        vec![
            ("baseline".into(), fmt_row(&self.baseline, self.baseline_mean())),
            ("hybrid".into(), fmt_row(&self.hybrid, self.hybrid_mean())),
            (
                "improvement".into(),
                self.improvements().into_iter().map(format_improvement).collect(),
            ),
        ]
    }
}

impl fmt::Display for ResultsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "")?;
        for s in &self.seeds {
            write!(f, " {:>10}", format!("seed {s}"))?;
        }
        writeln!(f, " {:>10}", "mean")?;
        for (label, cells) in self.rows() {
            write!(f, "{label:<12}")?;
            for c in cells {
                write!(f, " {c:>10}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Job {
    seed: u64,
    fold: usize,
    variant: Variant,
    schedule: usize,
}

/// Trains and evaluates every (seed, fold, variant, schedule) combination.
///
/// Each run starts from a fresh model initialized with its seed, so the
/// baseline and hybrid of one seed share their backbone initialization.
/// `progress` is called once per finished run, in completion order.
pub fn run_experiment(
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    k: usize,
    opts: &ExperimentOptions,
    progress: &(dyn Fn(&RunRecord) + Sync),
) -> Result<ResultsTable> {
    if seeds.is_empty() {
        return Err(Error::Config("experiment: at least one seed is required".into()));
    }
    if opts.schedules.is_empty() {
        return Err(Error::Config("experiment: at least one schedule is required".into()));
    }
    base.validate()?;
    let outfit_ids: Vec<String> = data
        .outfits()
        .into_iter()
        .filter(|(_, o)| o.is_complete())
        .map(|(id, _)| id)
        .collect();
    let folds = seeds
        .iter()
        .map(|&s| kfold_split(&outfit_ids, k, s))
        .collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for fold in 0..folds[si].len() {
            for variant in [Variant::Baseline, Variant::Hybrid] {
                for schedule in 0..opts.schedules.len() {
                    jobs.push(Job {
                        seed,
                        fold,
                        variant,
                        schedule,
                    });
                }
            }
        }
    }

    let run = |job: &Job| -> Result<RunRecord> {
        let si = seeds.iter().position(|&s| s == job.seed).expect("known seed");
        let fold = &folds[si][job.fold];
        let mut cfg = base.clone();
        cfg.seed = job.seed;
        cfg.k_folds = k;
        cfg.schedule = opts.schedules[job.schedule];
        cfg.checkpoint_dir = None;
        cfg.log_path = None;
        if job.variant == Variant::Baseline {
            cfg.loss.w2 = 0.0;
        }
        let out = train(&cfg, data, fold)?;
        let eval = evaluate_fold(&out.model, data, fold)?;
        let rec = RunRecord {
            seed: job.seed,
            fold: job.fold,
            variant: job.variant,
            schedule: cfg.schedule.name().to_string(),
            map_normalized: eval.map_normalized,
            final_mean_total: out.log.last().map_or(f64::NAN, |l| l.mean_total),
        };
        progress(&rec);
        Ok(rec)
    };
    let runs: Vec<RunRecord> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("experiment: thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let per_seed = |variant: Variant, schedule: &str| -> Vec<f64> {
        seeds
            .iter()
            .map(|&s| {
                let maps: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.seed == s && r.variant == variant && r.schedule == schedule)
                    .map(|r| r.map_normalized)
                    .collect();
                mean(&maps)
            })
            .collect()
    };
    // first schedule wins ties, keeping the choice deterministic
    let best = |variant: Variant| -> (String, Vec<f64>) {
        let mut best: Option<(String, Vec<f64>)> = None;
        for s in &opts.schedules {
            let v = per_seed(variant, s.name());
            if best.as_ref().is_none_or(|(_, b)| mean(&v) > mean(b)) {
                best = Some((s.name().to_string(), v));
            }
        }
        best.expect("at least one schedule")
    };
    let (baseline_schedule, baseline) = best(Variant::Baseline);
    let (hybrid_schedule, hybrid) = best(Variant::Hybrid);
    Ok(ResultsTable {
        seeds: seeds.to_vec(),
        baseline,
        hybrid,
        baseline_schedule,
        hybrid_schedule,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_formula() {
        assert_eq!(format_improvement(improvement_pct(0.1271, 0.1308)), "+2.91%");
        assert_eq!(format_improvement(improvement_pct(0.2, 0.2)), "+0.00%");
        assert_eq!(format_improvement(improvement_pct(0.2, 0.1)), "-50.00%");
    }

    #[test]
    fn table_layout() {
        let t = ResultsTable::from_means(vec![1, 2], vec![0.1, 0.2], vec![0.1, 0.3]);
        let rows = t.rows();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|(_, cells)| cells.len() == 3));
        assert_eq!(rows[2].1, vec!["+0.00%", "+50.00%", "+33.33%"]);
        let text = t.to_string();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().contains("seed 2"));
    }
}
