use super::*;

/// Forward algorithm over the joint chain, independent of the enumeration.
fn forward_prob(chain: &DiscreteHierChain, xs: &[usize]) -> f64 {
    let t = chain.joint_transition();
    let k = chain.joint_size();
    let emit = |s: usize, x: usize| chain.emission[chain.bottom_of(s)][x];
    let mut alpha: Vec<f64> = (0..k).map(|s| chain.initial[s] * emit(s, xs[0])).collect();
    for &x in &xs[1..] {
        alpha = (0..k).map(|b| (0..k).map(|a| alpha[a] * t[(a, b)]).sum::<f64>() * emit(b, x)).collect();
    }
    alpha.iter().sum()
}

fn all_windows(m: usize, n: usize) -> Vec<Vec<usize>> {
    (0..m.pow(n as u32))
        .map(|mut c| {
            let mut xs = vec![0; n];
            for x in xs.iter_mut().rev() {
                *x = c % m;
                c /= m;
            }
            xs
        })
        .collect()
}

#[test]
fn enumeration_matches_forward_recursion() {
    for (sizes, m, w) in [(vec![2], 2, 1), (vec![2, 3], 3, 1), (vec![2, 2], 3, 2)] {
        let chain = random_chain(&sizes, m, 4).unwrap();
        let joint = enumerate_joint(&chain, w).unwrap();
        for xs in all_windows(m, 2 * w + 1) {
            let want = forward_prob(&chain, &xs);
            assert!((joint.prob(&xs) - want).abs() < 1e-12, "{sizes:?} {xs:?}");
        }
        assert!((joint.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(joint.probs.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn deterministic_chain_gives_one_hot_joint() {
    let chain = DiscreteHierChain {
        state_sizes: vec![2, 2],
        alphabet: 3,
        top_transition: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        transitions: vec![vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.0, 1.0], vec![1.0, 0.0]]]],
        emission: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
        initial: vec![0.0, 0.0, 1.0, 0.0],
    };
    let joint = enumerate_joint(&chain, 1).unwrap();
    let hot: Vec<usize> = (0..joint.probs.len()).filter(|&i| joint.probs[i] != 0.0).collect();
    assert_eq!(hot.len(), 1);
    assert_eq!(joint.probs[hot[0]], 1.0);
    // state (1, 0): top 1 -> 0 -> 1; bottom follows parent-dependent rules.
    let xs: Vec<usize> = {
        let mut c = hot[0];
        let mut v = vec![0; 3];
        for x in v.iter_mut().rev() {
            *x = c % 3;
            c /= 3;
        }
        v
    };
    assert_eq!(forward_prob(&chain, &xs), 1.0);
}

#[test]
fn wider_window_marginalises_to_narrower() {
    let chain = random_chain(&[2, 2], 4, 8).unwrap();
    let w2 = enumerate_joint(&chain, 2).unwrap();
    let w1 = enumerate_joint(&chain, 1).unwrap();
    let m = w2.marginal(1);
    assert!(m.probs.iter().zip(&w1.probs).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn two_layer_emissions_are_recovered_at_minimal_window() {
    let chain = two_layer_min_window();
    let bundle = OperatorBundle::build(&chain, 2).unwrap();
    assert!(bundle.rank_ok);
    assert!(bundle.identity_residual().unwrap() < 1e-9);
    let rec = recover_emissions(&bundle, 2, 1).unwrap();
    // Upper-layer states share the emission of their bottom state.
    assert_eq!(rec.multiplicities, vec![2, 2]);
    let report = compare_recovery(&chain, &bundle, &rec).unwrap();
    assert!(report.max_abs_error < 1e-8, "{report:?}");
    assert!(report.hausdorff < 1e-8);
    assert!(report.subspace_residual < 1e-6, "{report:?}");
}

#[test]
fn single_layer_recovers_states_and_future_laws() {
    let chain = random_valid_chain(&[3], 5, 1, 3).unwrap();
    let bundle = OperatorBundle::build(&chain, 1).unwrap();
    let rec = recover_emissions(&bundle, 3, 2).unwrap();
    assert!(rec.warnings.is_empty());
    let report = compare_recovery(&chain, &bundle, &rec).unwrap();
    assert!(report.max_abs_error < 1e-8);
    assert!(report.subspace_residual < 1e-6);
}

#[test]
fn window_below_minimum_is_refused() {
    let chain = two_layer_min_window();
    let bundle = OperatorBundle::build(&chain, 1).unwrap();
    assert!(!bundle.rank_ok);
    assert!(matches!(recover_emissions(&bundle, 2, 0), Err(Error::Numerical(_))));
}

#[test]
fn sweep_finds_two_layer_transition_at_two() {
    let rows = minimal_window_sweep(&two_layer_min_window(), 1..=2, 0).unwrap();
    assert!(!rows[0].rank_ok);
    assert!(rows[1].rank_ok);
    assert!(rows[1].error.unwrap() < 1e-8);
    assert_eq!(transition_point(&rows), Some(2));
    let csv = sweep_csv(&rows);
    assert!(csv.starts_with("W,rank_ok,error\n1,false,\n2,true,"));
}

#[test]
fn single_layer_sweep_passes_at_one() {
    let chain = random_valid_chain(&[2], 3, 1, 9).unwrap();
    let rows = minimal_window_sweep(&chain, 1..=1, 0).unwrap();
    assert!(rows[0].rank_ok);
}

#[test]
fn small_alphabet_never_resolves_the_joint_state() {
    let chain = random_chain(&[3, 3], 2, 1).unwrap();
    let rows = minimal_window_sweep(&chain, 1..=3, 0).unwrap();
    assert!(rows.iter().all(|r| !r.rank_ok));
    assert_eq!(transition_point(&rows), None);
}

#[test]
fn identical_emissions_raise_collision_warning() {
    let mut chain = random_chain(&[3], 6, 11).unwrap();
    chain.emission[2] = chain.emission[0].clone();
    let bundle = OperatorBundle::build(&chain, 2).unwrap();
    assert!(bundle.rank_ok, "ratio {}", bundle.rank_ratio());
    let rec = recover_emissions(&bundle, 3, 0).unwrap();
    assert_eq!(rec.emissions.len(), 2);
    assert!(rec.warnings.iter().any(|w| w.contains("collision")));
}

#[test]
fn random_instances_recover_to_tolerance() {
    let results = verify_random_instances(&[2, 2], 8, 2, 8, 5).unwrap();
    for r in &results {
        assert!(r.report.max_abs_error < 1e-8, "{r:?}");
        assert!(r.report.hausdorff < 1e-8);
        assert!(r.identity_residual < 1e-9);
    }
}

#[test]
fn enumeration_limit_is_enforced() {
    let chain = random_chain(&[4, 4], 8, 1).unwrap();
    assert!(matches!(enumerate_joint(&chain, 4), Err(Error::Overflow(_))));
}

#[test]
fn invalid_tables_are_rejected() {
    let mut chain = random_chain(&[2, 2], 3, 1).unwrap();
    chain.emission[0][0] += 0.1;
    assert!(matches!(chain.validate(), Err(Error::Config(_))));
    let mut chain = random_chain(&[2, 2], 3, 1).unwrap();
    chain.initial.pop();
    assert!(matches!(chain.validate(), Err(Error::Shape(_))));
}

#[test]
fn chains_round_trip_through_json() {
    let chain = random_chain(&[2, 3], 4, 2).unwrap();
    let text = serde_json::to_string(&chain).unwrap();
    assert_eq!(serde_json::from_str::<DiscreteHierChain>(&text).unwrap(), chain);
}
