use std::sync::{Arc, Mutex};

use ems_core::attack::{AttackObjective, AttackScenario, DesignOptions, ResponseModel};
use ems_core::session::*;

/// A day on case14 with a designed attack armed before `attack_tick`.
fn scripted_day(seed: u64, attack_tick: u64) -> Session {
    let mut s = Session::new("replay", &SessionSpec::demo("case14", seed)).unwrap();
    for t in 0..24 {
        if t == attack_tick {
            let mut sc = AttackScenario::new(1, AttackObjective::MaxBaseFlow, ResponseModel::Dcopf);
            sc.load_shift_limit = 0.3;
            s.arm(ArmRequest::Designed { scenario: sc, options: DesignOptions::default() }).unwrap();
        }
        if t == attack_tick + 3 {
            s.arm(ArmRequest::Random { count: 1, sigmas: 25.0 }).unwrap();
        }
        s.step(&StepRequest::default()).unwrap();
    }
    s
}

#[test]
fn replay_is_byte_identical() {
    let a = scripted_day(3, 9);
    let b = scripted_day(3, 9);
    assert_eq!(a.log().events.len(), b.log().events.len());
    assert_eq!(a.log().to_jsonl(), b.log().to_jsonl());
    for t in 0..24 {
        let ra = a.record(t).unwrap();
        let rb = b.record(t).unwrap();
        assert_eq!(serde_json::to_string(&*ra).unwrap(), serde_json::to_string(&*rb).unwrap());
    }
    assert_eq!(a.log().verify(), Ok(()));
    // A different seed gives different telemetry and so a different log.
    assert_ne!(a.log().to_jsonl(), scripted_day(4, 9).log().to_jsonl());
}

#[test]
fn stealthy_attack_passes_bdd_but_not_the_detector() {
    let s = scripted_day(3, 9);
    let run = &s.record(9).unwrap().run;
    assert_eq!(run.alarms.attack.as_deref(), Some("state"));
    assert_eq!(run.alarms.bdd_pass, Some(true));
    assert_eq!(run.alarms.detector_alarm, Some(true));
    assert!(!run.alarms.top_zscores.is_empty());

    let naive = &s.record(12).unwrap().run;
    assert_eq!(naive.alarms.attack.as_deref(), Some("random"));
    assert_eq!(naive.alarms.bdd_pass, Some(false));
    assert_eq!(naive.alarms.eliminated.len(), 1);
    assert!(!naive.failed());
}

#[test]
fn clean_day_runs_quietly() {
    let mut s = Session::new("day", &SessionSpec::demo("case14", 8)).unwrap();
    let mut detector_alarms = 0;
    for _ in 0..24 {
        let run = s.step(&StepRequest::default()).unwrap();
        assert!(!run.failed(), "tick {}: {:?}", run.tick, run.stages);
        assert_eq!(run.alarms.sced_clean, Some(true), "tick {}", run.tick);
        assert!(run.alarms.detector_alarm.is_some());
        detector_alarms += run.alarms.detector_alarm.unwrap() as usize;
    }
    // Budget 0.02 over 24 ticks; more than three would be far out of line.
    assert!(detector_alarms <= 3, "{detector_alarms} detector alarms on a clean day");
}

#[test]
fn comparison_report_pairs_both_worlds() {
    let s = scripted_day(3, 9);
    let a = s.report("comparison", 9).unwrap();
    assert_eq!(a.tick, 9);
    let pairs = a.body["pairs"].as_array().unwrap();
    assert!(!pairs.is_empty());
    for p in pairs {
        assert!(p["cyber_percent"].is_f64() && p["physical_percent"].is_f64());
    }
    let pf = s.report("pf", 0).unwrap();
    assert!(!pf.body["trace"].as_array().unwrap().is_empty());
    assert!(!s.report("rtca", 0).unwrap().body["table"].as_array().unwrap().is_empty());
}

#[test]
fn sessions_do_not_interfere() {
    // Two sessions stepped from interleaved threads end up identical to
    // one stepped alone.
    let solo = {
        let mut s = Session::new("solo", &SessionSpec::demo("case14", 2)).unwrap();
        for _ in 0..6 {
            s.step(&StepRequest::default()).unwrap();
        }
        s.log().to_jsonl()
    };
    let a = Arc::new(Mutex::new(Session::new("a", &SessionSpec::demo("case14", 2)).unwrap()));
    let b = Arc::new(Mutex::new(Session::new("b", &SessionSpec::demo("case14", 2)).unwrap()));
    std::thread::scope(|scope| {
        for s in [&a, &b] {
            scope.spawn(move || {
                for t in 0..6 {
                    let mut g = s.lock().unwrap();
                    // Naming the scenario row explicitly is the same as the default.
                    let req = if t % 2 == 0 { StepRequest::default() } else { StepRequest { row: Some(t), ..Default::default() } };
                    g.step(&req).unwrap();
                }
            });
        }
        // Meddle with a third session meanwhile.
        scope.spawn(|| {
            let mut c = Session::new("c", &SessionSpec::demo("case14", 2)).unwrap();
            c.arm(ArmRequest::Random { count: 2, sigmas: 30.0 }).unwrap();
            c.step(&StepRequest { scale: Some(1.1), ..Default::default() }).unwrap();
        });
    });
    assert_eq!(a.lock().unwrap().log().to_jsonl(), solo);
    assert_eq!(b.lock().unwrap().log().to_jsonl(), solo);
}

#[test]
fn spec_round_trips_through_json() {
    let spec = SessionSpec::demo("case14", 1);
    let text = serde_json::to_string(&spec).unwrap();
    assert_eq!(serde_json::from_str::<SessionSpec>(&text).unwrap(), spec);
    let minimal: SessionSpec = serde_json::from_str(r#"{"case": "case2"}"#).unwrap();
    assert_eq!(minimal.case, CaseSource::Bundled("case2".into()));
    let inline: SessionSpec =
        serde_json::from_str(&format!(r#"{{"case": {}}}"#, ems_core::cases::CASE2)).unwrap();
    assert!(Session::new("i", &inline).is_ok());
}

#[test]
fn recalibration_is_logged() {
    let mut s = Session::new("cal", &SessionSpec::demo("case14", 1)).unwrap();
    let before = s.grouping().unwrap().clone();
    let g = s.calibrate(&CalibrateRequest { fa_budget: Some(0.1), ..Default::default() }).unwrap().clone();
    for (a, b) in before.groups.iter().zip(&g.groups) {
        assert!(b.threshold.unwrap() <= a.threshold.unwrap());
    }
    assert_eq!(s.log().events.last().unwrap().status, "calibrated");
    let mut bare = Session::new("bare", &SessionSpec::new(CaseSource::Bundled("case14".into()))).unwrap();
    assert!(bare.calibrate(&CalibrateRequest::default()).is_err());
    let run = bare.step(&StepRequest::default()).unwrap();
    assert_eq!(run.status("detector"), Some(StageState::Skipped));
}
