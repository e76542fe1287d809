//! Monte Carlo detection-probability surface: attack magnitude (the
//! attacker's predicted loading of its target) against false-alarm budget.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{calibrate_with, CalibrationOptions, group_distance, HistoryMatrix, LoadGrouping};
use crate::attack::{design_attack, AttackObjective, AttackScenario, DesignOptions, ResponseModel, Snapshot};
use crate::error::{DetectorError, EmsError};
use crate::grid::GridCase;

/// A load change to plant on clean load vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorAttack {
    pub label: String,
    /// Attacker-predicted loading of its target, percent of rating.
    pub magnitude: f64,
    /// Per-load MW change at the case's base loading.
    pub load_change: Vec<f64>,
}

/// Designs one attack per shift limit against `target_branch`, with the
/// attacker assuming a DC optimal power flow response.
pub fn designed_attacks(
    snap: &Snapshot,
    target_branch: u32,
    shift_limits: &[f64],
    opts: &DesignOptions,
) -> Result<Vec<DetectorAttack>, EmsError> {
    let mut out = Vec::new();
    for &tau in shift_limits {
        let mut sc = AttackScenario::new(target_branch, AttackObjective::MaxBaseFlow, ResponseModel::Dcopf);
        sc.load_shift_limit = tau;
        let d = design_attack(snap, &sc, opts)?;
        out.push(DetectorAttack {
            label: format!("branch {target_branch}, shift {tau}"),
            magnitude: d.response.reading.percent,
            load_change: d.attack.load_change.clone(),
        });
    }
    out.sort_by(|a, b| a.magnitude.total_cmp(&b.magnitude));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    pub fa_budgets: Vec<f64>,
    /// Monte Carlo trials per attack.
    pub trials: usize,
    pub seed: u64,
    pub jobs: usize,
    /// Calibration leave-out window, seconds.
    pub window_s: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions { fa_budgets: vec![0.01, 0.02, 0.05, 0.1], trials: 500, seed: 0, jobs: 1, window_s: super::DEFAULT_WINDOW_S }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub label: String,
    pub magnitude: f64,
    pub fa_budget: f64,
    pub trials: usize,
    pub detections: usize,
    pub dp: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Alarm rate on held-out clean vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalseAlarmRow {
    pub fa_budget: f64,
    pub samples: usize,
    pub alarms: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSurface {
    pub rows: Vec<SurfaceRow>,
    pub false_alarms: Vec<FalseAlarmRow>,
    /// Calibrated grouping per budget, same order as `fa_budgets`.
    pub groupings: Vec<LoadGrouping>,
}

impl DetectionSurface {
    pub fn rows_for(&self, fa_budget: f64) -> impl Iterator<Item = &SurfaceRow> {
        self.rows.iter().filter(move |r| r.fa_budget == fa_budget)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DetectorError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| DetectorError::Format(e.to_string()))?;
        }
        out.flush().map_err(|e| DetectorError::Format(e.to_string()))
    }
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Group distances of `p` against the history, one per group.
fn distances(p: &[f64], history: &HistoryMatrix, grouping: &LoadGrouping) -> Vec<f64> {
    grouping.groups.iter().map(|g| group_distance(p, history, &g.loads, None).map_or(0.0, |d| d.0)).collect()
}

fn alarms(d: &[f64], grouping: &LoadGrouping) -> bool {
    d.iter().zip(&grouping.groups).any(|(d, g)| *d > g.threshold.unwrap_or(f64::INFINITY))
}

/// Calibrates `grouping` on `history` at each budget, replays every
/// `held_out` row for the realized false-alarm rate, then plants each
/// attack on randomly drawn held-out rows. The attack's load change is
/// scaled by the row's total load over the case's base total so that its
/// relative size follows the load level.
pub fn evaluate_detector(
    case: &GridCase,
    history: &HistoryMatrix,
    held_out: &HistoryMatrix,
    grouping: &LoadGrouping,
    attacks: &[DetectorAttack],
    opts: &EvaluationOptions,
) -> Result<DetectionSurface, EmsError> {
    history.check(case)?;
    held_out.check(case)?;
    if held_out.n_h() == 0 {
        return Err(DetectorError::InsufficientHistory { rows: 0, needed: 1 }.into());
    }
    for a in attacks {
        if a.load_change.len() != case.loads.len() {
            return Err(DetectorError::DimensionMismatch { expected: case.loads.len(), got: a.load_change.len() }.into());
        }
    }
    let jobs = opts.jobs.max(1);
    let groupings = opts
        .fa_budgets
        .iter()
        .map(|&fa| calibrate_with(history, grouping, fa, &CalibrationOptions { window_s: opts.window_s, jobs }))
        .collect::<Result<Vec<_>, _>>()?;

    let clean: Vec<Vec<f64>> = held_out.rows.iter().map(|r| distances(&r.p, history, grouping)).collect();
    let false_alarms = opts
        .fa_budgets
        .iter()
        .zip(&groupings)
        .map(|(&fa_budget, g)| {
            let alarms = clean.iter().filter(|d| alarms(d, g)).count();
            let (ci_low, ci_high) = wilson_interval(alarms, clean.len());
            FalseAlarmRow { fa_budget, samples: clean.len(), alarms, rate: alarms as f64 / clean.len() as f64, ci_low, ci_high }
        })
        .collect();

    let base_total: f64 = case.loads.iter().map(|l| l.p).sum();
    let run = |k: usize| -> Vec<usize> {
        let a = &attacks[k];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut hits = vec![0; groupings.len()];
        for _ in 0..opts.trials {
            let row = &held_out.rows[rng.gen_range(0..held_out.n_h())].p;
            let scale = row.iter().sum::<f64>() / base_total;
            let p: Vec<f64> = row.iter().zip(&a.load_change).map(|(v, d)| v + scale * d).collect();
            let d = distances(&p, history, grouping);
            for (h, g) in hits.iter_mut().zip(&groupings) {
                *h += alarms(&d, g) as usize;
            }
        }
        hits
    };
    let hits: Vec<Vec<usize>> = if jobs <= 1 {
        (0..attacks.len()).map(run).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<Vec<usize>>> = vec![None; attacks.len()];
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(attacks.len()) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if k >= attacks.len() {
                        break;
                    }
                    let h = run(k);
                    done.lock().expect("worker panicked")[k] = Some(h);
                });
            }
        });
        slots.into_iter().map(|h| h.expect("every attack evaluated")).collect()
    };

    let mut rows = Vec::new();
    for (j, &fa_budget) in opts.fa_budgets.iter().enumerate() {
        for (a, h) in attacks.iter().zip(&hits) {
            let (ci_low, ci_high) = wilson_interval(h[j], opts.trials);
            rows.push(SurfaceRow {
                label: a.label.clone(),
                magnitude: a.magnitude,
                fa_budget,
                trials: opts.trials,
                detections: h[j],
                dp: if opts.trials == 0 { 0.0 } else { h[j] as f64 / opts.trials as f64 },
                ci_low,
                ci_high,
            });
        }
    }
    Ok(DetectionSurface { rows, false_alarms, groupings })
}
