use std::collections::{BTreeSet, VecDeque};
use std::sync::OnceLock;

use ems_core::attack::{forge_measurements, DesignOptions, Snapshot, StateAttack};
use ems_core::cases;
use ems_core::config::EmsConfig;
use ems_core::detector::*;
use ems_core::error::DetectorError;
use ems_core::estimation::{estimate_with_bdd, estimated_loads, generate_telemetry};
use ems_core::grid::{GridCase, Network};
use ems_core::powerflow::{solve, BusState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const TRAIN_DAYS: usize = 90;
const HELD_OUT_DAYS: usize = 50;

struct Fixture {
    case: GridCase,
    snap: Snapshot,
    train: HistoryMatrix,
    held_out: HistoryMatrix,
    /// Noise-free loads behind `held_out`, as the physical system sees them.
    held_out_true: HistoryMatrix,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let case = cases::case14();
        let snap = Snapshot::new(case.clone(), EmsConfig::default()).unwrap();
        let all = generate_history(&case, TRAIN_DAYS + HELD_OUT_DAYS, 11);
        let train = all.slice(0..TRAIN_DAYS * 24);
        let held_out = all.slice(TRAIN_DAYS * 24..all.n_h());
        let clean = generate_history_with(&case, TRAIN_DAYS + HELD_OUT_DAYS, 11, &HistoryOptions::default().clean());
        let held_out_true = clean.slice(TRAIN_DAYS * 24..clean.n_h());
        Fixture { case, snap, train, held_out, held_out_true }
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn empty_history_is_refused() {
    let c = cases::case14();
    let h = generate_history(&c, 0, 1);
    assert_eq!(h.n_h(), 0);
    assert_eq!(
        calibrate(&h, &LoadGrouping::single(c.loads.len()), 0.02),
        Err(DetectorError::InsufficientHistory { rows: 0, needed: 100 })
    );
}

#[test]
fn history_is_seeded() {
    let c = cases::case14();
    assert_eq!(generate_history(&c, 3, 5), generate_history(&c, 3, 5));
    assert_ne!(generate_history(&c, 3, 5), generate_history(&c, 3, 6));
}

#[test]
fn history_mean_tracks_base_load() {
    let c = cases::case14();
    let h = generate_history(&c, 30, 2);
    assert_eq!(h.n_h(), 720);
    assert!(h.check(&c).is_ok());
    let (mean, _) = h.moments();
    for (m, l) in mean.iter().zip(&c.loads) {
        assert!((m - l.p).abs() <= 0.05 * l.p, "load {}: mean {m} vs base {}", l.id, l.p);
    }
}

/// Buses reachable from `start` using only buses in `allowed`.
fn reach(case: &GridCase, start: u32, allowed: &BTreeSet<u32>) -> BTreeSet<u32> {
    let mut seen = BTreeSet::from([start]);
    let mut q = VecDeque::from([start]);
    while let Some(b) = q.pop_front() {
        for br in case.branches.iter().filter(|br| br.status) {
            let other = if br.from_bus == b {
                br.to_bus
            } else if br.to_bus == b {
                br.from_bus
            } else {
                continue;
            };
            if allowed.contains(&other) && seen.insert(other) {
                q.push_back(other);
            }
        }
    }
    seen
}

#[test]
fn groups_are_connected_neighborhoods() {
    let c = cases::case14();
    let net = Network::build(&c).unwrap();
    for size in 1..=6 {
        let g = group_loads(&c, &net, size);
        assert!(g.is_partition(c.loads.len()));
        for grp in &g.groups {
            assert!(!grp.loads.is_empty() && grp.loads.len() <= size);
            let buses: BTreeSet<u32> = grp.loads.iter().map(|&l| c.loads[l].bus).collect();
            let first = *buses.iter().next().unwrap();
            assert_eq!(reach(&c, first, &buses), buses, "size {size}: {:?} not connected", grp.loads);
        }
    }
    assert_eq!(group_loads(&c, &net, 4), group_loads(&c, &net, 4));
}

#[test]
fn shifted_load_alarms_its_group_only() {
    let f = fixture();
    let g = calibrate(&f.train, &group_loads(&f.case, &f.snap.net, 4), 0.02).unwrap();
    assert!(g.groups.len() >= 3);
    let largest = f.case.loads.iter().map(|l| l.p).fold(0.0, f64::max);
    for j in 0..g.groups.len() {
        let mut p = f.train.rows[100].p.clone();
        p[g.groups[j].loads[0]] += 0.5 * largest;
        let v = detect(&p, &f.train, &g).unwrap();
        assert_eq!(v.alarmed_groups(), vec![j]);
        assert!(v.anomalous);
    }
}

#[test]
fn grouping_beats_whole_vector_distance_in_high_dimension() {
    // 1000 independent loads; three of them moved inside one group of five.
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let base: Vec<f64> = (0..n).map(|_| rng.gen_range(20.0..80.0)).collect();
    let rows = (0..200)
        .map(|t| LoadVector { timestamp: t * 3600, p: base.iter().map(|b| b + 0.02 * b * noise.sample(&mut rng)).collect() })
        .collect();
    let h = HistoryMatrix { load_ids: (1..=n as u32).collect(), rows };
    let whole = calibrate(&h, &LoadGrouping::single(n), 0.02).unwrap();
    let grouped = LoadGrouping {
        groups: (0..n / 5).map(|j| LoadGroup { loads: (5 * j..5 * j + 5).collect(), threshold: None, floored: false }).collect(),
        calibration: None,
    };
    let grouped = calibrate(&h, &grouped, 0.02).unwrap();

    let mut p: Vec<f64> = base.iter().map(|b| b + 0.02 * b * noise.sample(&mut rng)).collect();
    for l in [500, 501, 502] {
        p[l] += 0.15 * base[l];
    }
    let w = detect(&p, &h, &whole).unwrap();
    let g = detect(&p, &h, &grouped).unwrap();
    let whole_ratio = w.groups[0].distance / w.groups[0].threshold;
    let group_ratio = g.groups[100].distance / g.groups[100].threshold;
    assert!(whole_ratio < group_ratio, "whole {whole_ratio} vs group {group_ratio}");
    assert!(!w.anomalous);
    assert!(g.groups[100].alarm);
}

#[test]
fn zscore_recovers_a_four_sigma_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sigma = [2.0, 5.0, 0.5];
    let mu = [40.0, 100.0, 8.0];
    let rows = (0..2000)
        .map(|t| LoadVector {
            timestamp: t,
            p: (0..3).map(|i| Normal::new(mu[i], sigma[i]).unwrap().sample(&mut rng)).collect(),
        })
        .collect();
    let h = HistoryMatrix { load_ids: vec![1, 2, 3], rows };
    let g = calibrate(&h, &LoadGrouping::single(3), 0.02).unwrap();
    let p = vec![mu[0] + 4.0 * sigma[0], mu[1], mu[2]];
    let v = detect(&p, &h, &g).unwrap();
    assert!(v.anomalous);
    let z = zscore_localize(&p, &h, &v);
    assert_eq!(z[0].load, 0);
    assert!((z[0].score - 4.0).abs() < 0.3, "z = {}", z[0].score);
}

#[test]
fn zero_spread_load_is_flagged() {
    let rows = (0..120).map(|t| LoadVector { timestamp: t, p: vec![5.0, t as f64] }).collect();
    let h = HistoryMatrix { load_ids: vec![1, 2], rows };
    let v = DetectionVerdict {
        groups: vec![GroupVerdict { loads: vec![0, 1], distance: 9.0, threshold: 1.0, alarm: true, nearest_row: 0 }],
        anomalous: true,
        zscores: None,
    };
    let z = zscore_localize(&[9.0, 50.0], &h, &v);
    let flat = z.iter().find(|z| z.load == 0).unwrap();
    assert!(flat.zero_std && flat.score == 0.0);
}

/// Runs the estimator on forged telemetry for true loads `row` and an
/// attack moving `delta` MW between two loads.
fn estimated_under_attack(f: &Fixture, row: &[f64], delta: &[f64], seed: u64) -> Vec<f64> {
    let case = f.case.with_load_p(row);
    let net = &f.snap.net;
    let cfg = &f.snap.config;
    let pf = solve(&case, net, &cfg.pf);
    assert!(pf.converged());
    let x = BusState { v_mag: pf.v_mag.clone(), v_ang: pf.v_ang.clone() };
    let z = generate_telemetry(&case, net, &x, &f.snap.plan, &cfg.noise, seed, 0);
    let attack = StateAttack::from_load_change(&case, net, delta).unwrap();
    let forged = forge_measurements(&case, net, &z, &x, &attack, None).unwrap();
    let se = estimate_with_bdd(&case, net, &forged, &cfg.se).unwrap();
    estimated_loads(&case, net, &se.estimate, &pf.gen_p)
}

#[test]
fn zscores_point_at_the_attacked_pair() {
    let f = fixture();
    let g = calibrate(&f.train, &group_loads(&f.case, &f.snap.net, 5), 0.02).unwrap();
    // Loads at buses 4 and 9 share the first group.
    let (a, b) = (2, 5);
    assert!(g.groups[0].loads.contains(&a) && g.groups[0].loads.contains(&b));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let trials = 100;
    let mut hits = 0;
    for seed in 0..trials {
        let row = &f.held_out_true.rows[rng.gen_range(0..f.held_out.n_h())].p;
        let shift = if rng.gen_bool(0.5) { 20.0 } else { -20.0 };
        let mut delta = vec![0.0; f.case.loads.len()];
        delta[a] = shift;
        delta[b] = -shift;
        let p = estimated_under_attack(f, row, &delta, seed);
        let v = detect(&p, &f.train, &g).unwrap();
        if !v.anomalous {
            continue;
        }
        let z = zscore_localize(&p, &f.train, &v);
        let top: BTreeSet<usize> = z.iter().take(2).map(|z| z.load).collect();
        hits += (top == BTreeSet::from([a, b])) as usize;
    }
    assert!(hits as f64 >= 0.8 * trials as f64, "top-2 hit {hits}/{trials}");
}

#[test]
fn clean_estimates_pass_the_detector() {
    let f = fixture();
    let g = calibrate(&f.train, &group_loads(&f.case, &f.snap.net, 5), 0.02).unwrap();
    let zero = vec![0.0; f.case.loads.len()];
    let alarms = (0..40)
        .filter(|&k| {
            let p = estimated_under_attack(f, &f.held_out_true.rows[k * 29].p, &zero, k as u64);
            detect(&p, &f.train, &g).unwrap().anomalous
        })
        .count();
    assert!(alarms <= 3, "{alarms}/40 clean estimates alarmed");
}

fn surface() -> &'static (Vec<DetectorAttack>, DetectionSurface) {
    static S: OnceLock<(Vec<DetectorAttack>, DetectionSurface)> = OnceLock::new();
    S.get_or_init(|| {
        let f = fixture();
        let attacks =
            designed_attacks(&f.snap, 1, &[0.0, 0.01, 0.02, 0.05, 0.1, 0.3, 0.5, 0.6], &DesignOptions::default()).unwrap();
        let opts = EvaluationOptions { fa_budgets: vec![0.01, 0.02, 0.05], trials: 500, seed: 3, jobs: 4, ..Default::default() };
        let grouping = group_loads(&f.case, &f.snap.net, 5);
        let s = evaluate_detector(&f.case, &f.train, &f.held_out, &grouping, &attacks, &opts).unwrap();
        (attacks, s)
    })
}

#[test]
fn large_overloads_are_detected() {
    let (attacks, s) = surface();
    assert!(attacks.iter().any(|a| a.magnitude >= 105.0));
    for r in s.rows_for(0.02).filter(|r| r.magnitude >= 105.0) {
        assert!(r.trials >= 500);
        assert!(r.dp >= 0.95, "{}: dp {}", r.label, r.dp);
    }
}

#[test]
fn detection_grows_with_magnitude() {
    let (_, s) = surface();
    for fa in [0.01, 0.02, 0.05] {
        let rows: Vec<&SurfaceRow> = s.rows_for(fa).collect();
        for w in rows.windows(2) {
            assert!(w[0].magnitude <= w[1].magnitude);
            assert!(w[1].ci_high >= w[0].dp, "fa {fa}: {} then {}", w[0].dp, w[1].dp);
        }
    }
}

#[test]
fn realized_false_alarms_track_the_budget() {
    let (_, s) = surface();
    let fa = s.false_alarms.iter().find(|r| r.fa_budget == 0.02).unwrap();
    assert!(fa.samples >= 1000);
    assert!((fa.rate - 0.02).abs() <= 0.5 * 0.02, "realized {}", fa.rate);
    // A null attack alarms at about the same rate as clean data.
    let null = s.rows_for(0.02).find(|r| r.magnitude <= 100.0 + 1e-9).unwrap();
    assert!(null.ci_low <= 0.02 * 1.5 && null.ci_high >= 0.02 * 0.5, "null dp {}", null.dp);
}

#[test]
fn zero_budget_never_alarms_on_history() {
    let f = fixture();
    let g = calibrate(&f.train, &group_loads(&f.case, &f.snap.net, 4), 0.0).unwrap();
    // Each row's distance to the rest of the history, outside the window.
    for (j, grp) in g.groups.iter().enumerate() {
        let loo = leave_one_out(&f.train, &grp.loads, DEFAULT_WINDOW_S);
        let max = loo.iter().cloned().fold(0.0, f64::max);
        assert_eq!(grp.threshold, Some(max), "group {j}");
    }
}

#[test]
fn surface_exports_csv() {
    let (attacks, s) = surface();
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("label,magnitude,fa_budget,trials,detections,dp,ci_low,ci_high"));
    assert_eq!(text.lines().count(), 1 + 3 * attacks.len());
}

fn small_history(seed: u64, n_loads: usize, rows: usize) -> HistoryMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HistoryMatrix {
        load_ids: (1..=n_loads as u32).collect(),
        rows: (0..rows)
            .map(|t| LoadVector { timestamp: t as u64 * 3600, p: (0..n_loads).map(|_| rng.gen_range(0.0..50.0)).collect() })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn whole_vector_equals_single_group(seed in 0u64..1000, n in 1usize..12) {
        let h = small_history(seed, n, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
        let g = calibrate(&h, &LoadGrouping::single(n), 0.05).unwrap();
        let v = detect(&p, &h, &g).unwrap();
        let (d, r) = nearest_distance(&p, &h).unwrap();
        prop_assert_eq!(v.groups[0].distance.to_bits(), d.to_bits());
        prop_assert_eq!(v.groups[0].nearest_row, r);
        // Minimum property against a plain Euclidean scan.
        for row in &h.rows {
            prop_assert!(d <= euclid(&p, &row.p) + 1e-12);
        }
        prop_assert!((d - euclid(&p, &h.rows[r].p)).abs() < 1e-9);
    }

    #[test]
    fn verdicts_follow_load_permutations(seed in 0u64..1000, n in 2usize..10, size in 1usize..5) {
        let h = small_history(seed, n, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // New position i holds old load perm[i].
        let mut inv = vec![0; n];
        for (i, &o) in perm.iter().enumerate() {
            inv[o] = i;
        }
        let groups = LoadGrouping {
            groups: (0..n).collect::<Vec<_>>().chunks(size)
                .map(|c| LoadGroup { loads: c.to_vec(), threshold: None, floored: false }).collect(),
            calibration: None,
        };
        let pgroups = LoadGrouping {
            groups: groups.groups.iter()
                .map(|g| LoadGroup { loads: g.loads.iter().rev().map(|&l| inv[l]).collect(), threshold: None, floored: false })
                .collect(),
            calibration: None,
        };
        let ph = HistoryMatrix {
            load_ids: perm.iter().map(|&o| h.load_ids[o]).collect(),
            rows: h.rows.iter().map(|r| LoadVector { timestamp: r.timestamp, p: perm.iter().map(|&o| r.p[o]).collect() }).collect(),
        };
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..60.0)).collect();
        let pp: Vec<f64> = perm.iter().map(|&o| p[o]).collect();

        let g = calibrate(&h, &groups, 0.1).unwrap();
        let pg = calibrate(&ph, &pgroups, 0.1).unwrap();
        let v = detect(&p, &h, &g).unwrap();
        let pv = detect(&pp, &ph, &pg).unwrap();
        prop_assert_eq!(v.anomalous, pv.anomalous);
        for (a, b) in v.groups.iter().zip(&pv.groups) {
            prop_assert_eq!(a.distance.to_bits(), b.distance.to_bits());
            prop_assert_eq!(a.threshold.to_bits(), b.threshold.to_bits());
            prop_assert_eq!(a.alarm, b.alarm);
            prop_assert_eq!(a.nearest_row, b.nearest_row);
        }
        // Same call twice, same verdict.
        prop_assert_eq!(detect(&p, &h, &g).unwrap(), v);
    }

    #[test]
    fn larger_budget_never_raises_thresholds(seed in 0u64..1000, a in 0.0f64..0.5, b in 0.0f64..0.5) {
        let h = small_history(seed, 6, 120);
        let grouping = LoadGrouping { groups: vec![
            LoadGroup { loads: vec![0, 1, 2], threshold: None, floored: false },
            LoadGroup { loads: vec![3, 4, 5], threshold: None, floored: false },
        ], calibration: None };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t_lo = calibrate(&h, &grouping, lo).unwrap();
        let t_hi = calibrate(&h, &grouping, hi).unwrap();
        for (x, y) in t_lo.groups.iter().zip(&t_hi.groups) {
            prop_assert!(y.threshold.unwrap() <= x.threshold.unwrap());
        }
    }

    #[test]
    fn anomalous_iff_some_group_alarms(seed in 0u64..1000, shift in 0.0f64..80.0) {
        let h = small_history(seed, 6, 100);
        let g = calibrate(&h, &LoadGrouping::per_load(6), 0.05).unwrap();
        let mut p = h.rows[0].p.clone();
        p[(seed % 6) as usize] += shift;
        let v = detect(&p, &h, &g).unwrap();
        prop_assert_eq!(v.anomalous, v.groups.iter().any(|g| g.alarm));
        for gv in &v.groups {
            prop_assert_eq!(gv.alarm, gv.distance > gv.threshold);
        }
    }
}

#[test]
fn clean_series_sits_under_the_noisy_one() {
    let c = cases::case14();
    let opts = HistoryOptions::default();
    let noisy = generate_history_with(&c, 20, 8, &opts);
    let clean = generate_history_with(&c, 20, 8, &opts.clean());
    for (l, load) in c.loads.iter().enumerate() {
        let sigma = ((opts.noise_rel * load.p).powi(2) + opts.noise_abs_mw.powi(2)).sqrt();
        let resid: Vec<f64> = noisy.rows.iter().zip(&clean.rows).map(|(a, b)| a.p[l] - b.p[l]).collect();
        let rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((rms / sigma - 1.0).abs() < 0.1, "load {}: rms {rms} vs sigma {sigma}", load.id);
    }
}
