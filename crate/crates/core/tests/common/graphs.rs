//! Random network strategies shared by the property tests and the
//! acceptance report.

use std::collections::BTreeMap;

use evoloop::graph::{LabelKind, NetworkDraft};
use proptest::prelude::*;

/// A DAG over `Programmer 1..=n`: edges only go from lower to higher
/// positions of a random permutation, so labels and topology are unrelated.
pub fn dag(max_nodes: usize) -> impl Strategy<Value = NetworkDraft> {
    (1..=max_nodes)
        .prop_flat_map(|n| {
            let perm = Just((1..=n as u64).collect::<Vec<_>>()).prop_shuffle();
            let subtasks = prop::collection::vec("[A-Za-z0-9][A-Za-z0-9 ,.()_:/-]{0,30}[A-Za-z0-9.)]", n);
            let edges = prop::collection::vec(prop::bool::weighted(0.15), n * n);
            (perm, subtasks, edges)
        })
        .prop_map(|(perm, subtasks, bits)| {
            let n = perm.len();
            let label = |i: usize| LabelKind::Programmer.label(perm[i]);
            let composition: Vec<(String, String)> = (0..n).map(|i| (label(i), subtasks[i].clone())).collect();
            let mut workflow: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for j in 0..n {
                let deps = (0..j).filter(|&i| bits[i * n + j]).map(label).collect();
                workflow.insert(label(j), deps);
            }
            NetworkDraft { composition, workflow }
        })
}
