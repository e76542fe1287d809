use super::*;
use crate::cases;
use crate::config::EmsConfig;
use crate::estimation::{generate_telemetry, MeasurementPlan};
use crate::grid::Network;

fn case14() -> (GridCase, Network) {
    let c = cases::case14();
    let n = Network::build(&c).unwrap();
    (c, n)
}

#[test]
fn zero_attack_leaves_telemetry_alone() {
    let snap = Snapshot::new(cases::case14(), EmsConfig::default()).unwrap();
    let z = generate_telemetry(&snap.case, &snap.net, &snap.state(), &snap.plan, &snap.config.noise, 3, 0);
    let zero = StateAttack::zero(&snap.case);
    let forged = forge_measurements(&snap.case, &snap.net, &z, &snap.state(), &zero, Some(0)).unwrap();
    assert_eq!(forged, z);
}

#[test]
fn single_non_load_bus_is_rejected() {
    // Bus 7 carries no load; moving its angle alone injects at bus 7.
    let (c, n) = case14();
    let mut u = vec![0.0; c.n_buses()];
    u[c.bus_index(7).unwrap()] = 0.01;
    let err = StateAttack::new(&c, &n, u).unwrap_err();
    assert!(matches!(err, AttackError::NonLoadInjection(_) | AttackError::NetLoadChange(_)), "{err:?}");
}

#[test]
fn reference_bus_is_rejected() {
    let (c, n) = case14();
    let mut u = vec![0.0; c.n_buses()];
    u[c.bus_index(1).unwrap()] = 0.01;
    assert_eq!(StateAttack::new(&c, &n, u).unwrap_err(), AttackError::TouchesReference(1));
}

#[test]
fn bus_change_roundtrip() {
    let (c, n) = case14();
    let mut delta = vec![0.0; c.n_buses()];
    delta[c.bus_index(4).unwrap()] = 3.0;
    delta[c.bus_index(9).unwrap()] = -1.0;
    delta[c.bus_index(14).unwrap()] = -2.0;
    let a = StateAttack::from_bus_load_change(&c, &n, &delta).unwrap();
    for (got, want) in a.bus_load_change.iter().zip(&delta) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert!(a.net_change.abs() < 1e-9);
    assert!(!a.support.contains(&1));
}

#[test]
fn unbalanced_change_is_rejected() {
    let (c, n) = case14();
    let mut delta = vec![0.0; c.n_buses()];
    delta[c.bus_index(4).unwrap()] = 1.0;
    assert!(matches!(StateAttack::from_bus_load_change(&c, &n, &delta), Err(AttackError::NetLoadChange(_))));
}

#[test]
fn budget_below_footprint_is_refused() {
    let snap = Snapshot::new(cases::case14(), EmsConfig::default()).unwrap();
    let mut delta = vec![0.0; snap.case.n_buses()];
    delta[snap.case.bus_index(13).unwrap()] = 1.0;
    delta[snap.case.bus_index(14).unwrap()] = -1.0;
    let a = StateAttack::from_bus_load_change(&snap.case, &snap.net, &delta).unwrap();
    let z = generate_telemetry(&snap.case, &snap.net, &snap.state(), &snap.plan, &snap.config.noise, 1, 0);
    let need = footprint(&snap.case, &snap.net, &z, &a).len();
    assert!(need > 0);
    assert!(forge_measurements(&snap.case, &snap.net, &z, &snap.state(), &a, Some(need)).is_ok());
    assert_eq!(
        forge_measurements(&snap.case, &snap.net, &z, &snap.state(), &a, Some(need - 1)).unwrap_err(),
        AttackError::OverBudget { footprint: need, budget: need - 1 }
    );
}

#[test]
fn directions_keep_non_load_buses_balanced() {
    let (c, n) = case14();
    let support: Vec<usize> = (1..c.n_buses()).collect();
    let dirs = feasible_directions(&c, &n, &support);
    // 13 free angles, one balance constraint per bus without load (1, 7, 8).
    assert_eq!(dirs.len(), 10);
    for d in &dirs {
        let a = StateAttack::new(&c, &n, d.clone()).unwrap();
        assert!(a.net_change.abs() < 1e-9);
    }
}

#[test]
fn scenario_parses_with_defaults() {
    let s: AttackScenario = serde_json::from_str(r#"{"target_branch": 1, "assumed_response": "sced"}"#).unwrap();
    assert_eq!(s.objective, AttackObjective::MaxBaseFlow);
    assert_eq!(s.load_shift_limit, 0.10);
    assert_eq!(s.measurement_budget, None);
    assert_eq!(s.assumed_response, ResponseModel::Sced);
    assert!(s.attack_cost.is_empty());
}

#[test]
fn scenario_validation() {
    let c = cases::case14();
    let mut s = AttackScenario::new(99, AttackObjective::MaxBaseFlow, ResponseModel::Dcopf);
    assert_eq!(s.validate(&c), Err(AttackError::UnknownTarget(99)));
    s.target_branch = 1;
    s.load_shift_limit = 1.0;
    assert!(matches!(s.validate(&c), Err(AttackError::InvalidScenario(_))));
    s.load_shift_limit = 0.0;
    assert!(s.validate(&c).is_ok());
}

#[test]
fn plan_kinds_footprint() {
    // A lone voltage-magnitude plan never changes.
    let (c, n) = case14();
    let plan = MeasurementPlan { entries: vec![(MeasurementKind::BusVMag, 4)] };
    assert_eq!(footprint_size(&c, &n, &plan.entries, &[3]), 0);
}
