mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use resbuild_core::executor::run_sequential;
use resbuild_core::inference::infer_until_valid;
use resbuild_core::txn::{predicted_from_traces, run_locking, run_mvto, AbortReason, DispatchPolicy, TxnOptions};

use common::{gen_config, pairwise_conflicting, random_config, rng, Shape};

fn policy() -> impl Strategy<Value = DispatchPolicy> {
    prop_oneof![
        Just(DispatchPolicy::SerialOrder),
        Just(DispatchPolicy::Reverse),
        any::<u64>().prop_map(DispatchPolicy::Seeded),
        prop::collection::vec(0usize..4, 0..24).prop_map(DispatchPolicy::Scripted),
    ]
}

#[test]
fn gen_without_edge_commits_in_serial_order() {
    let c = gen_config(&[]);
    let seq = run_sequential(&c).unwrap();
    let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Reverse)).unwrap();
    assert_eq!(out.final_state, seq.final_state);
    // gcc ran first, read the initial gen.h and was overtaken by gen's commit
    assert_eq!(out.aborts(), 1);
    assert_eq!(out.abort_log[0].task.as_str(), "gcc");
    assert_eq!(out.abort_log[0].reason, AbortReason::StaleRead);
}

#[test]
fn reverse_dispatch_on_a_chain_of_conflicts() {
    // every task reads what all earlier ones appended; the last of n tasks
    // runs first and must eventually see every earlier commit
    let c = pairwise_conflicting(4);
    let seq = run_sequential(&c).unwrap();
    let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Reverse)).unwrap();
    assert_eq!(out.final_state, seq.final_state);
    assert!(out.aborts() > 0);
}

#[test]
fn a_task_can_restart_more_often_than_its_position() {
    // t1 is rolled back once and commits twice; each of its commits and t0's
    // can overtake t2, so "at most k restarts" does not hold, 2^k - 1 does
    let c = random_config(&mut rng(88), Shape { max_tasks: 5, max_accesses: 4, ..Shape::default() });
    let script = vec![
        2, 1, 1, 2, 2, 0, 2, 0, 1, 1, 1, 2, 0, 1, 0, 2, 0, 1, 0, 2, 1, 1, 1, 2, 0, 1, 2, 1, 1, 0, 1, 2, 0, 0, 0, 0, 1,
        2, 0, 0,
    ];
    let out = run_mvto(&c, &TxnOptions::with_policy(DispatchPolicy::Scripted(script))).unwrap();
    assert_eq!(out.restarts[&"t2".into()], 3);
    assert_eq!(
        out.export_abort_log(),
        "0 t2 2 UnrealizableRead -\n1 t1 1 StaleRead t2\n2 t2 2 Cascade -\n3 t2 2 UnrealizableRead -\n"
    );
    assert_eq!(out.final_state, run_sequential(&c).unwrap().final_state);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn mvto_equals_sequential(seed in any::<u64>(), policy in policy(), workers in prop::option::of(1usize..4)) {
        let c = random_config(&mut rng(seed), Shape::default());
        let seq = run_sequential(&c).unwrap();
        let out = run_mvto(&c, &TxnOptions { policy, workers }).unwrap();
        prop_assert_eq!(out.final_state, seq.final_state);
        for (t, trace) in &out.traces {
            prop_assert_eq!(&trace.events, &seq.per_task[t].events);
        }
    }

    #[test]
    fn locking_equals_sequential(seed in any::<u64>(), policy in policy(), predict in any::<bool>()) {
        let c = random_config(&mut rng(seed), Shape::default());
        let seq = run_sequential(&c).unwrap();
        let predicted = if predict { predicted_from_traces(&seq.per_task) } else { BTreeMap::new() };
        let out = run_locking(&c, &predicted, &TxnOptions::with_policy(policy)).unwrap();
        prop_assert_eq!(out.final_state, seq.final_state);
    }

    #[test]
    fn valid_configurations_never_abort(seed in any::<u64>(), policy in policy()) {
        let c = infer_until_valid(&random_config(&mut rng(seed), Shape::default())).unwrap().config;
        let out = run_mvto(&c, &TxnOptions::with_policy(policy)).unwrap();
        prop_assert_eq!(out.aborts(), 0);
    }

    /// A task restarts only when an earlier task commits underneath it, so the
    /// task at position k restarts at most 2^k - 1 times.
    #[test]
    fn restarts_stay_below_two_to_the_position(seed in any::<u64>(), policy in policy()) {
        let c = random_config(&mut rng(seed), Shape::default());
        let out = run_mvto(&c, &TxnOptions::with_policy(policy)).unwrap();
        for (k, t) in c.graph.tasks().iter().enumerate() {
            prop_assert!(out.restarts[t] < 1 << k, "{} at {} restarted {} times", t, k, out.restarts[t]);
        }
    }

    #[test]
    fn abort_log_export_has_one_line_per_abort(seed in any::<u64>(), policy in policy()) {
        let c = random_config(&mut rng(seed), Shape::default());
        let out = run_mvto(&c, &TxnOptions::with_policy(policy)).unwrap();
        let text = out.export_abort_log();
        prop_assert_eq!(text.lines().count(), out.aborts());
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            prop_assert_eq!(fields.len(), 5);
            prop_assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        }
    }
}
