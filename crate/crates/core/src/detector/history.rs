use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::DetectorError;
use crate::grid::GridCase;

/// Per-load MW at one instant, in case load order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadVector {
    pub timestamp: u64,
    pub p: Vec<f64>,
}

/// Trusted, attack-free load snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryMatrix {
    pub load_ids: Vec<u32>,
    pub rows: Vec<LoadVector>,
}

impl HistoryMatrix {
    pub fn empty(load_ids: Vec<u32>) -> Self {
        HistoryMatrix { load_ids, rows: Vec::new() }
    }

    pub fn n_h(&self) -> usize {
        self.rows.len()
    }

    pub fn n_loads(&self) -> usize {
        self.load_ids.len()
    }

    /// Rows `range` as a new matrix.
    pub fn slice(&self, range: std::ops::Range<usize>) -> HistoryMatrix {
        HistoryMatrix { load_ids: self.load_ids.clone(), rows: self.rows[range].to_vec() }
    }

    /// Checks the matrix against the case's load list.
    pub fn check(&self, case: &GridCase) -> Result<(), DetectorError> {
        let ids: Vec<u32> = case.loads.iter().map(|l| l.id).collect();
        if ids != self.load_ids {
            return Err(DetectorError::Format(format!("history columns {:?} do not match case loads {:?}", self.load_ids, ids)));
        }
        self.check_rows()
    }

    fn check_rows(&self) -> Result<(), DetectorError> {
        for r in &self.rows {
            if r.p.len() != self.n_loads() {
                return Err(DetectorError::DimensionMismatch { expected: self.n_loads(), got: r.p.len() });
            }
            if r.p.iter().any(|v| !v.is_finite()) {
                return Err(DetectorError::Format(format!("non-finite load at timestamp {}", r.timestamp)));
            }
        }
        Ok(())
    }

    /// Sample mean and standard deviation (n − 1) per load.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_h() as f64;
        let k = self.n_loads();
        let mut mean = vec![0.0; k];
        for r in &self.rows {
            for (m, v) in mean.iter_mut().zip(&r.p) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; k];
        for r in &self.rows {
            for i in 0..k {
                var[i] += (r.p[i] - mean[i]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| if n > 1.0 { (v / (n - 1.0)).sqrt() } else { 0.0 }).collect();
        (mean, std)
    }

    /// `timestamp,<load id>...` header, one row per snapshot.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DetectorError> {
        let fmt = |e: csv::Error| DetectorError::Format(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.load_ids.iter().map(|id| id.to_string()));
        out.write_record(&header).map_err(fmt)?;
        for r in &self.rows {
            let mut rec = vec![r.timestamp.to_string()];
            rec.extend(r.p.iter().map(|v| format!("{v}")));
            out.write_record(&rec).map_err(fmt)?;
        }
        out.flush().map_err(|e| DetectorError::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<HistoryMatrix, DetectorError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| DetectorError::Format(e.to_string()))?.clone();
        if header.get(0) != Some("timestamp") {
            return Err(DetectorError::Format("first column must be `timestamp`".into()));
        }
        let load_ids = header
            .iter()
            .skip(1)
            .map(|h| h.trim().parse::<u32>().map_err(|_| DetectorError::Format(format!("bad load id column `{h}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| DetectorError::Format(e.to_string()))?;
            let bad = |what: &str| DetectorError::Format(format!("row {}: bad {what}", line + 2));
            let timestamp = rec.get(0).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("timestamp"))?;
            let p = rec.iter().skip(1).map(|v| v.trim().parse::<f64>().map_err(|_| bad("value"))).collect::<Result<Vec<_>, _>>()?;
            rows.push(LoadVector { timestamp, p });
        }
        let h = HistoryMatrix { load_ids, rows };
        h.check_rows()?;
        Ok(h)
    }
}

/// Shape of the synthetic load history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistoryOptions {
    /// Peak-to-mean swing of the daily cycle.
    pub daily_amplitude: f64,
    /// Spread of the per-load daily amplitude around `daily_amplitude`.
    pub amplitude_spread: f64,
    /// Spread of the per-load daily peak hour, hours.
    pub phase_spread_h: f64,
    pub weekly_amplitude: f64,
    /// Hourly persistence of the slow random walk.
    pub walk_persistence: f64,
    /// Hourly innovation of the walk, shared across loads.
    pub walk_common_sigma: f64,
    /// Hourly innovation of the walk, per load.
    pub walk_own_sigma: f64,
    /// Relative measurement noise.
    pub noise_rel: f64,
    /// Absolute measurement noise, MW; about what state estimation adds.
    pub noise_abs_mw: f64,
    pub start_timestamp: u64,
}

impl HistoryOptions {
    /// Same shape without measurement noise.
    pub fn clean(&self) -> HistoryOptions {
        HistoryOptions { noise_rel: 0.0, noise_abs_mw: 0.0, ..self.clone() }
    }
}

impl Default for HistoryOptions {
    fn default() -> Self {
        HistoryOptions {
            daily_amplitude: 0.15,
            amplitude_spread: 0.03,
            phase_spread_h: 1.5,
            weekly_amplitude: 0.05,
            walk_persistence: 0.98,
            walk_common_sigma: 0.004,
            walk_own_sigma: 0.003,
            noise_rel: 0.01,
            noise_abs_mw: 0.6,
            start_timestamp: 0,
        }
    }
}

/// Hourly history: base MW × daily cycle × weekly factor × (1 + AR(1)
/// walk), plus Gaussian noise. Deterministic in `seed`; the noise draws are
/// taken even when their scale is zero, so [`HistoryOptions::clean`] with the
/// same seed yields the underlying noise-free series.
pub fn generate_history(case: &GridCase, days: usize, seed: u64) -> HistoryMatrix {
    generate_history_with(case, days, seed, &HistoryOptions::default())
}

pub fn generate_history_with(case: &GridCase, days: usize, seed: u64, opts: &HistoryOptions) -> HistoryMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = case.loads.len();
    let amp: Vec<f64> =
        (0..n).map(|_| opts.daily_amplitude + opts.amplitude_spread * rng.gen_range(-1.0..1.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| opts.phase_spread_h * rng.gen_range(-1.0..1.0)).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let stationary = |s: f64| s / (1.0 - opts.walk_persistence.powi(2)).max(1e-12).sqrt();
    let mut common = stationary(opts.walk_common_sigma) * std_normal.sample(&mut rng);
    let mut own: Vec<f64> = (0..n).map(|_| stationary(opts.walk_own_sigma) * std_normal.sample(&mut rng)).collect();

    let mut rows = Vec::with_capacity(days * 24);
    for hour in 0..days * 24 {
        let day = (hour / 24) as f64;
        let h = (hour % 24) as f64;
        let weekly = 1.0 + opts.weekly_amplitude * (2.0 * PI * day / 7.0).sin();
        let p = (0..n)
            .map(|l| {
                let base = case.loads[l].p;
                // Peak near 18:00.
                let daily = 1.0 + amp[l] * (2.0 * PI * (h - 12.0 - phase[l]) / 24.0).sin();
                let clean = base * daily * weekly * (1.0 + common + own[l]);
                let sigma = ((opts.noise_rel * base).powi(2) + opts.noise_abs_mw.powi(2)).sqrt();
                clean + sigma * std_normal.sample(&mut rng)
            })
            .collect();
        rows.push(LoadVector { timestamp: opts.start_timestamp + hour as u64 * 3600, p });
        common = opts.walk_persistence * common + opts.walk_common_sigma * std_normal.sample(&mut rng);
        for o in own.iter_mut() {
            *o = opts.walk_persistence * *o + opts.walk_own_sigma * std_normal.sample(&mut rng);
        }
    }
    HistoryMatrix { load_ids: case.loads.iter().map(|l| l.id).collect(), rows }
}
