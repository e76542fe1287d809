use super::*;
use crate::cases;
use crate::grid::Network;
use crate::powerflow::{solve, BusState, PowerFlowOptions};

fn solved(case: &GridCase) -> (Network, BusState) {
    let net = Network::build(case).unwrap();
    let sol = solve(case, &net, &PowerFlowOptions::default());
    assert!(sol.converged());
    (net, BusState { v_mag: sol.v_mag, v_ang: sol.v_ang })
}

#[test]
fn flat_state_without_shunts_gives_zero_flows() {
    let case = cases::case2();
    let net = Network::build(&case).unwrap();
    let plan = MeasurementPlan::full(&case);
    let flat = BusState { v_mag: vec![1.0; 2], v_ang: vec![0.0; 2] };
    let set = generate_telemetry(&case, &net, &flat, &plan, &NoiseModel::noiseless(), 0, 0);
    for m in &set.measurements {
        let expect = if m.kind == MeasurementKind::BusVMag { 1.0 } else { 0.0 };
        assert!((m.value - expect).abs() < 1e-15, "{m:?}");
    }
}

#[test]
fn model_matches_power_flow_outputs() {
    let case = cases::case2();
    let net = Network::build(&case).unwrap();
    let sol = solve(&case, &net, &PowerFlowOptions::default());
    let state = BusState { v_mag: sol.v_mag.clone(), v_ang: sol.v_ang.clone() };
    let set = generate_telemetry(&case, &net, &state, &MeasurementPlan::full(&case), &NoiseModel::noiseless(), 0, 0);
    let base = case.base_mva;
    for m in &set.measurements {
        let expect = match m.kind {
            MeasurementKind::BranchPFrom => sol.branches[0].p_from / base,
            MeasurementKind::BranchQFrom => sol.branches[0].q_from / base,
            MeasurementKind::BranchPTo => sol.branches[0].p_to / base,
            MeasurementKind::BranchQTo => sol.branches[0].q_to / base,
            MeasurementKind::BusVMag => sol.v_mag[case.bus_index(m.element).unwrap()],
            _ => continue,
        };
        assert!((m.value - expect).abs() < 1e-12, "{m:?} vs {expect}");
    }
}

#[test]
fn fixed_seed_reproduces_telemetry() {
    let case = cases::case14();
    let (net, state) = solved(&case);
    let plan = MeasurementPlan::standard(&case);
    let a = generate_telemetry(&case, &net, &state, &plan, &NoiseModel::default(), 7, 0);
    let b = generate_telemetry(&case, &net, &state, &plan, &NoiseModel::default(), 7, 0);
    assert_eq!(a, b);
    let c = generate_telemetry(&case, &net, &state, &plan, &NoiseModel::default(), 8, 0);
    assert_ne!(a, c);
}

#[test]
fn snapshot_round_trip() {
    let case = cases::case14();
    let (net, state) = solved(&case);
    let set = generate_telemetry(&case, &net, &state, &MeasurementPlan::standard(&case), &NoiseModel::default(), 1, 3)
        .with_eliminated(5);
    let text = write_snapshot(&set);
    assert!(text.starts_with("id,kind,element,value,sigma,status"));
    assert_eq!(read_snapshot(&text, 3).unwrap(), set);
}

#[test]
fn full_placement_is_one_island() {
    let case = cases::case14();
    let (net, state) = solved(&case);
    let set = generate_telemetry(&case, &net, &state, &MeasurementPlan::full(&case), &NoiseModel::default(), 1, 0);
    let obs = observability_analysis(&case, &net, &set);
    assert!(obs.is_fully_observable());
    assert!(obs.unobservable_branches.is_empty());
}

#[test]
fn noiseless_estimate_recovers_truth() {
    let case = cases::case14();
    let (net, state) = solved(&case);
    let set =
        generate_telemetry(&case, &net, &state, &MeasurementPlan::standard(&case), &NoiseModel::noiseless(), 0, 0);
    let obs = observability_analysis(&case, &net, &set);
    let est = wls_estimate(&case, &net, &set, &obs, &SeOptions::default()).unwrap();
    for b in 0..case.n_buses() {
        assert!((est.v_mag[b] - state.v_mag[b]).abs() < 1e-6);
        assert!((est.v_ang[b] - state.v_ang[b]).abs() < 1e-6);
    }
    assert_eq!(est.bdd_pass, Some(true));
}

#[test]
fn no_redundancy_is_reported() {
    // Two buses, three measurements, three states.
    let case = cases::case2();
    let (net, state) = solved(&case);
    let plan = MeasurementPlan {
        entries: vec![
            (MeasurementKind::BranchPFrom, 1),
            (MeasurementKind::BusVMag, 1),
            (MeasurementKind::BusVMag, 2),
        ],
    };
    let set = generate_telemetry(&case, &net, &state, &plan, &NoiseModel::default(), 0, 0);
    let obs = observability_analysis(&case, &net, &set);
    let est = wls_estimate(&case, &net, &set, &obs, &SeOptions::default()).unwrap();
    assert!(matches!(chi2_bdd(&est, 0.99), Err(EstimationError::InsufficientRedundancy { .. })));
}

#[test]
fn corrupting_a_redundancy_pair_is_unresolvable() {
    // P on the only branch is measured twice; everything else is critical.
    let case = cases::case2();
    let (net, state) = solved(&case);
    let plan = MeasurementPlan {
        entries: vec![
            (MeasurementKind::BranchPFrom, 1),
            (MeasurementKind::BranchPTo, 1),
            (MeasurementKind::BranchQFrom, 1),
            (MeasurementKind::BusVMag, 1),
        ],
    };
    let mut set = generate_telemetry(&case, &net, &state, &plan, &NoiseModel::noiseless(), 0, 0);
    set.measurements[0].value += 20.0 * set.measurements[0].sigma;
    let err = estimate_with_bdd(&case, &net, &set, &SeOptions::default()).unwrap_err();
    assert!(matches!(err, EstimationError::BadDataUnresolvable { .. }), "{err:?}");
}

#[test]
fn invalid_measurements_are_rejected() {
    let case = cases::case2();
    let (net, state) = solved(&case);
    let mut set =
        generate_telemetry(&case, &net, &state, &MeasurementPlan::full(&case), &NoiseModel::default(), 0, 0);
    set.measurements[0].sigma = 0.0;
    assert!(set.validate(&case).is_err());
    set.measurements[0].sigma = 0.01;
    set.measurements[0].element = 99;
    assert!(set.validate(&case).is_err());
}
