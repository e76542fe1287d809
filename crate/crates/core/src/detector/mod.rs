//! Nearest-neighbor detector for load-redistribution attacks: the estimated
//! load vector is compared against trusted history, one small group of
//! neighboring loads at a time.

mod evaluate;
mod history;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::DetectorError;
use crate::grid::{GridCase, Network};

pub use evaluate::{
    designed_attacks, evaluate_detector, wilson_interval, DetectorAttack, EvaluationOptions, FalseAlarmRow,
    DetectionSurface, SurfaceRow,
};
pub use history::{generate_history, generate_history_with, HistoryMatrix, HistoryOptions, LoadVector};

/// Calibration refuses shorter histories.
pub const MIN_HISTORY: usize = 100;
/// Thresholds below this many MW are raised to it and flagged.
pub const THRESHOLD_FLOOR: f64 = 1e-6;
/// Default calibration leave-out window, seconds.
pub const DEFAULT_WINDOW_S: u64 = 24 * 3600;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadGroup {
    /// Load positions in case order.
    pub loads: Vec<usize>,
    pub threshold: Option<f64>,
    /// Threshold was raised to the floor.
    #[serde(default)]
    pub floored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadGrouping {
    pub groups: Vec<LoadGroup>,
    pub calibration: Option<Calibration>,
}

/// How the thresholds were set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub fa_budget: f64,
    /// Per-group quantile level, 1 − budget/m.
    pub level: f64,
    pub history_rows: usize,
    pub window_s: u64,
    pub method: String,
}

impl LoadGrouping {
    /// One group holding every load.
    pub fn single(n_loads: usize) -> Self {
        LoadGrouping { groups: vec![LoadGroup { loads: (0..n_loads).collect(), threshold: None, floored: false }], calibration: None }
    }

    /// One group per load.
    pub fn per_load(n_loads: usize) -> Self {
        LoadGrouping {
            groups: (0..n_loads).map(|l| LoadGroup { loads: vec![l], threshold: None, floored: false }).collect(),
            calibration: None,
        }
    }

    pub fn n_loads(&self) -> usize {
        self.groups.iter().map(|g| g.loads.len()).sum()
    }

    pub fn is_calibrated(&self) -> bool {
        self.groups.iter().all(|g| g.threshold.is_some())
    }

    /// Group index per load position.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_loads()];
        for (j, g) in self.groups.iter().enumerate() {
            for &l in &g.loads {
                out[l] = j;
            }
        }
        out
    }

    /// True when the groups are a disjoint cover of `0..n_loads`.
    pub fn is_partition(&self, n_loads: usize) -> bool {
        let mut seen = vec![false; n_loads];
        for g in &self.groups {
            for &l in &g.loads {
                if l >= n_loads || seen[l] {
                    return false;
                }
                seen[l] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Packs loads into groups of at most `target_size` by breadth-first
/// search over the bus graph. Each group starts at the bus of the first
/// unassigned load and only passes through buses that still hold
/// unassigned loads or carry no load at all.
pub fn group_loads(case: &GridCase, net: &Network, target_size: usize) -> LoadGrouping {
    let target_size = target_size.max(1);
    let n_bus = case.n_buses();
    let mut at_bus: Vec<Vec<usize>> = vec![Vec::new(); n_bus];
    for l in 0..case.loads.len() {
        at_bus[case.load_bus(l)].push(l);
    }
    let mut assigned = vec![false; case.loads.len()];
    let mut groups = Vec::new();
    while let Some(start) = (0..case.loads.len()).find(|&l| !assigned[l]) {
        let mut loads = Vec::new();
        let mut seen = vec![false; n_bus];
        let mut queue = VecDeque::from([case.load_bus(start)]);
        seen[case.load_bus(start)] = true;
        while let Some(b) = queue.pop_front() {
            for &l in &at_bus[b] {
                if !assigned[l] && loads.len() < target_size {
                    assigned[l] = true;
                    loads.push(l);
                }
            }
            if loads.len() >= target_size {
                break;
            }
            let mut next: Vec<usize> = net.idx.adjacency(b).iter().map(|k| k.far).collect();
            next.sort_unstable();
            next.dedup();
            for n in next {
                let passable = at_bus[n].is_empty() || at_bus[n].iter().any(|&l| !assigned[l]);
                if !seen[n] && passable {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        loads.sort_unstable();
        groups.push(LoadGroup { loads, threshold: None, floored: false });
    }
    LoadGrouping { groups, calibration: None }
}

/// Euclidean norm of `a − b`. Squared terms are summed smallest first so
/// the result does not depend on element order.
fn norm(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let mut sq: Vec<f64> = a.zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum::<f64>().sqrt()
}

/// Whole-vector nearest-neighbor distance, min over r of ‖p − h_r‖, with
/// the index of the closest row.
pub fn nearest_distance(p: &[f64], history: &HistoryMatrix) -> Option<(f64, usize)> {
    history
        .rows
        .iter()
        .enumerate()
        .map(|(r, h)| (norm(p.iter().copied(), h.p.iter().copied()), r))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
}

/// Group distance, min over r of ‖pʲ − hʲ_r‖ on the loads in `group`,
/// skipping history row `skip`.
pub fn group_distance(p: &[f64], history: &HistoryMatrix, group: &[usize], skip: Option<usize>) -> Option<(f64, usize)> {
    group_distance_where(p, history, group, |r| Some(r) != skip)
}

fn group_distance_where(
    p: &[f64],
    history: &HistoryMatrix,
    group: &[usize],
    keep: impl Fn(usize) -> bool,
) -> Option<(f64, usize)> {
    history
        .rows
        .iter()
        .enumerate()
        .filter(|&(r, _)| keep(r))
        .map(|(r, h)| (norm(group.iter().map(|&l| p[l]), group.iter().map(|&l| h.p[l])), r))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
}

/// Sample quantile with linear interpolation between order statistics
/// (the R type 7 / NumPy default rule).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Per-group leave-one-out nearest distances over the history. Rows whose
/// timestamps lie within `window` seconds of the left-out row are left out
/// with it; 0 leaves out the row alone.
pub fn leave_one_out(history: &HistoryMatrix, group: &[usize], window: u64) -> Vec<f64> {
    (0..history.n_h())
        .map(|r| {
            let t = history.rows[r].timestamp;
            let keep = |s: usize| s != r && history.rows[s].timestamp.abs_diff(t) >= window.max(1);
            group_distance_where(&history.rows[r].p, history, group, keep)
                .or_else(|| group_distance(&history.rows[r].p, history, group, Some(r)))
                .map_or(0.0, |d| d.0)
        })
        .collect()
}

/// Sets each group's threshold at the 1 − fa_budget/m quantile of its
/// leave-one-out distances, so the chance that any of the m groups alarms
/// on clean data is about `fa_budget`.
pub fn calibrate(history: &HistoryMatrix, grouping: &LoadGrouping, fa_budget: f64) -> Result<LoadGrouping, DetectorError> {
    calibrate_with(history, grouping, fa_budget, &CalibrationOptions::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Leave-out window around each row, seconds. Neighboring hours are
    /// near copies of each other, so leaving out the row alone gives
    /// distances that are too small for data from other days.
    pub window_s: u64,
    pub jobs: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { window_s: DEFAULT_WINDOW_S, jobs: 1 }
    }
}

pub fn calibrate_with(
    history: &HistoryMatrix,
    grouping: &LoadGrouping,
    fa_budget: f64,
    opts: &CalibrationOptions,
) -> Result<LoadGrouping, DetectorError> {
    let (jobs, window) = (opts.jobs, opts.window_s);
    if history.n_h() < MIN_HISTORY {
        return Err(DetectorError::InsufficientHistory { rows: history.n_h(), needed: MIN_HISTORY });
    }
    if grouping.n_loads() != history.n_loads() {
        return Err(DetectorError::DimensionMismatch { expected: history.n_loads(), got: grouping.n_loads() });
    }
    let m = grouping.groups.len() as f64;
    let level = 1.0 - fa_budget.clamp(0.0, 1.0) / m;
    let loo: Vec<Vec<f64>> = if jobs <= 1 {
        grouping.groups.iter().map(|g| leave_one_out(history, &g.loads, window)).collect()
    } else {
        std::thread::scope(|s| {
            let hs: Vec<_> = grouping.groups.iter().map(|g| s.spawn(move || leave_one_out(history, &g.loads, window))).collect();
            hs.into_iter().map(|h| h.join().expect("calibration worker panicked")).collect()
        })
    };
    let mut out = grouping.clone();
    for (g, d) in out.groups.iter_mut().zip(loo) {
        let t = quantile(&d, level);
        g.floored = t < THRESHOLD_FLOOR;
        g.threshold = Some(t.max(THRESHOLD_FLOOR));
    }
    out.calibration = Some(Calibration {
        fa_budget,
        level,
        history_rows: history.n_h(),
        window_s: window,
        method: "per-group windowed leave-one-out nearest distances, type-7 quantile at 1 - budget/groups".into(),
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupVerdict {
    pub loads: Vec<usize>,
    pub distance: f64,
    pub threshold: f64,
    pub alarm: bool,
    /// History row that achieved the minimum.
    pub nearest_row: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub groups: Vec<GroupVerdict>,
    pub anomalous: bool,
    /// Filled by [`zscore_localize`].
    #[serde(default)]
    pub zscores: Option<Vec<ZScore>>,
}

impl DetectionVerdict {
    pub fn alarmed_groups(&self) -> Vec<usize> {
        self.groups.iter().enumerate().filter(|(_, g)| g.alarm).map(|(j, _)| j).collect()
    }
}

/// Group distances against calibrated thresholds; anomalous when any group
/// alarms.
pub fn detect(p: &[f64], history: &HistoryMatrix, grouping: &LoadGrouping) -> Result<DetectionVerdict, DetectorError> {
    if p.len() != history.n_loads() {
        return Err(DetectorError::DimensionMismatch { expected: history.n_loads(), got: p.len() });
    }
    if grouping.n_loads() != p.len() {
        return Err(DetectorError::DimensionMismatch { expected: p.len(), got: grouping.n_loads() });
    }
    if history.n_h() == 0 || !grouping.is_calibrated() {
        return Err(DetectorError::NotCalibrated);
    }
    let groups: Vec<GroupVerdict> = grouping
        .groups
        .iter()
        .map(|g| {
            let (distance, nearest_row) = group_distance(p, history, &g.loads, None).expect("history is not empty");
            let threshold = g.threshold.expect("checked above");
            GroupVerdict { loads: g.loads.clone(), distance, threshold, alarm: distance > threshold, nearest_row }
        })
        .collect();
    let anomalous = groups.iter().any(|g| g.alarm);
    Ok(DetectionVerdict { groups, anomalous, zscores: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub load: usize,
    pub group: usize,
    pub score: f64,
    /// History showed no spread for this load; score set to 0.
    pub zero_std: bool,
}

/// |p_i − mean_i| / std_i for loads in alarmed groups, highest first.
pub fn zscore_localize(p: &[f64], history: &HistoryMatrix, verdict: &DetectionVerdict) -> Vec<ZScore> {
    let (mean, std) = history.moments();
    let mut out = Vec::new();
    for (j, g) in verdict.groups.iter().enumerate().filter(|(_, g)| g.alarm) {
        for &l in &g.loads {
            let zero_std = std[l] <= 0.0;
            let score = if zero_std { 0.0 } else { (p[l] - mean[l]).abs() / std[l] };
            out.push(ZScore { load: l, group: j, score, zero_std });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.load.cmp(&b.load)));
    out
}
