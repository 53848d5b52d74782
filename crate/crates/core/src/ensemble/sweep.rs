use std::fmt::Write as _;

use rayon::prelude::*;

use super::{run_trial, wilson_ci, EnsembleConfig, EnsembleError, Scenario};
use crate::gate::BrokerKind;

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub grid_n: Vec<usize>,
    pub grid_k: Vec<usize>,
    pub grid_r: Vec<usize>,
    pub seeds: u64,
    /// Trial `s` of every cell runs with seed `base_seed + s`.
    pub base_seed: u64,
    pub scenarios: Vec<Scenario>,
    pub broker: BrokerKind,
}

impl SweepSpec {
    /// The 3×3×3 grid.
    pub fn full(seeds: u64) -> SweepSpec {
        SweepSpec {
            grid_n: vec![10, 50, 200],
            grid_k: vec![2, 4, 8],
            grid_r: vec![5, 10, 25],
            seeds,
            base_seed: 0,
            scenarios: Scenario::ALL.to_vec(),
            broker: BrokerKind::AllowAll,
        }
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &n in &self.grid_n {
            for &k in &self.grid_k {
                for &r in &self.grid_r {
                    out.push((n, k, r));
                }
            }
        }
        out
    }

    pub fn trial_count(&self) -> u64 {
        self.cells().len() as u64 * self.seeds * self.scenarios.len() as u64
    }
}

/// Agreement counts for one scenario. For clean runs agreement is a pass,
/// for faulted runs it is a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStat {
    pub scenario: Scenario,
    pub seeds: u64,
    pub agree: u64,
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl ScenarioStat {
    fn new(scenario: Scenario, seeds: u64, agree: u64) -> Result<ScenarioStat, EnsembleError> {
        let (ci_lo, ci_hi) = wilson_ci(agree, seeds)?;
        Ok(ScenarioStat {
            scenario,
            seeds,
            agree,
            rate: agree as f64 / seeds as f64,
            ci_lo,
            ci_hi,
        })
    }

    fn bracket(&self) -> String {
        format!("{:.3} [{:.3}, {:.3}]", self.rate, self.ci_lo, self.ci_hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub stats: Vec<ScenarioStat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub scenarios: Vec<Scenario>,
    pub cells: Vec<SweepCell>,
    pub aggregate: Vec<ScenarioStat>,
    /// Every trial whose verdict disagreed with its scenario.
    pub misses: Vec<EnsembleConfig>,
}

/// Runs every (cell, seed, scenario) trial, in parallel, and folds the
/// results in that order.
pub fn sweep(spec: &SweepSpec) -> Result<SweepReport, EnsembleError> {
    if spec.seeds == 0 {
        return Err(EnsembleError::Config("seeds must be positive".into()));
    }
    let mut jobs = Vec::new();
    for (n, k, r) in spec.cells() {
        for s in 0..spec.seeds {
            for &scenario in &spec.scenarios {
                let mut cfg = EnsembleConfig::new(n, k, r, spec.base_seed.wrapping_add(s), scenario);
                cfg.broker = spec.broker;
                cfg.validate()?;
                jobs.push(cfg);
            }
        }
    }
    let agree: Vec<bool> = jobs
        .par_iter()
        .map(|cfg| run_trial(cfg).map(|t| t.agree))
        .collect::<Result<_, _>>()?;

    let per_cell = spec.seeds as usize * spec.scenarios.len();
    let mut cells = Vec::new();
    let mut totals = vec![0u64; spec.scenarios.len()];
    for (ci, (n, k, r)) in spec.cells().into_iter().enumerate() {
        let chunk = &agree[ci * per_cell..(ci + 1) * per_cell];
        let mut stats = Vec::new();
        for (si, &scenario) in spec.scenarios.iter().enumerate() {
            let hits = chunk
                .iter()
                .skip(si)
                .step_by(spec.scenarios.len())
                .filter(|a| **a)
                .count() as u64;
            totals[si] += hits;
            stats.push(ScenarioStat::new(scenario, spec.seeds, hits)?);
        }
        cells.push(SweepCell { n, k, r, stats });
    }
    let runs = spec.seeds * cells.len() as u64;
    let aggregate = spec
        .scenarios
        .iter()
        .zip(&totals)
        .map(|(&sc, &hits)| ScenarioStat::new(sc, runs, hits))
        .collect::<Result<_, _>>()?;
    let misses = jobs
        .into_iter()
        .zip(&agree)
        .filter(|(_, a)| !**a)
        .map(|(c, _)| c)
        .collect();
    Ok(SweepReport {
        scenarios: spec.scenarios.clone(),
        cells,
        aggregate,
        misses,
    })
}

fn header(s: Scenario) -> String {
    match s {
        Scenario::Clean => "clean pass".into(),
        f => format!("{f} detect"),
    }
}

impl SweepReport {
    /// Columns `n,k,r,scenario,seeds,agree,rate,ci_lo,ci_hi`. The aggregate
    /// rows use `all` for n, k and r.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k,r,scenario,seeds,agree,rate,ci_lo,ci_hi\n");
        let mut row = |n: &str, k: &str, r: &str, s: &ScenarioStat| {
            let _ = writeln!(
                out,
                "{n},{k},{r},{},{},{},{:.3},{:.3},{:.3}",
                s.scenario, s.seeds, s.agree, s.rate, s.ci_lo, s.ci_hi
            );
        };
        for c in &self.cells {
            for s in &c.stats {
                row(&c.n.to_string(), &c.k.to_string(), &c.r.to_string(), s);
            }
        }
        for s in &self.aggregate {
            row("all", "all", "all", s);
        }
        out
    }

    /// One row per cell plus the aggregate, each rate with its interval.
    pub fn render_table(&self) -> String {
        let width = 22;
        let mut out = format!("{:>4} {:>2} {:>3}", "N", "K", "R");
        for &s in &self.scenarios {
            let _ = write!(out, "  {:<width$}", header(s));
        }
        out.push('\n');
        for c in &self.cells {
            let _ = write!(out, "{:>4} {:>2} {:>3}", c.n, c.k, c.r);
            for s in &c.stats {
                let _ = write!(out, "  {:<width$}", s.bracket());
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>12}", "all");
        for s in &self.aggregate {
            let _ = write!(out, "  {:<width$}", s.bracket());
        }
        out.push('\n');
        out
    }

    /// True when every clean run passed and every faulted run failed.
    pub fn perfect(&self) -> bool {
        self.misses.is_empty()
    }
}
