//! Reference phase hyperparameters and unlock schedule.

use ofa_core::scheduler::PhaseName;

/// `(phase, lr, epochs, warmup epochs, subnets per step)`.
pub const PHASE_TABLE: [(PhaseName, f64, usize, usize, usize); 12] = [
    (PhaseName::Full, 1.0e-3, 180, 0, 0),
    (PhaseName::Eks, 3.0e-2, 120, 5, 1),
    (PhaseName::El1, 2.5e-3, 25, 0, 2),
    (PhaseName::El2, 7.5e-3, 120, 5, 2),
    (PhaseName::Eh1, 2.5e-3, 25, 0, 2),
    (PhaseName::Eh2, 7.5e-3, 60, 5, 2),
    (PhaseName::Eh3, 1.0e-2, 90, 5, 2),
    (PhaseName::Eh4, 3.0e-2, 120, 5, 2),
    (PhaseName::Ed1, 2.5e-3, 25, 0, 2),
    (PhaseName::Ed2, 7.5e-3, 120, 5, 2),
    (PhaseName::Ew1, 2.5e-3, 25, 0, 4),
    (PhaseName::Ew2, 7.5e-3, 120, 5, 4),
];

/// Expected phase order: Full, EKS, then EL (parallel blocks), EH (exits),
/// ED and EW.
pub fn expected_order(parallel: bool, exits: bool) -> Vec<&'static str> {
    let mut v = vec!["Full", "EKS"];
    if parallel {
        v.extend(["EL1", "EL2"]);
    }
    if exits {
        v.extend(["EH1", "EH2", "EH3", "EH4"]);
    }
    v.extend(["ED1", "ED2", "EW1", "EW2"]);
    v
}

/// `(kernel, level, height, depth, width)`.
pub type Sets = (Vec<usize>, Vec<u8>, Vec<usize>, Vec<usize>, Vec<usize>);

/// Expected unlocked sets after `phase` on an architecture with both
/// parallel blocks and exits.
pub fn expected_sets(phase: &str) -> Sets {
    let order = expected_order(true, true);
    let rank = order.iter().position(|p| *p == phase).unwrap();
    let reached = |p: &str| order.iter().position(|q| *q == p).unwrap() <= rank;
    let kernel = if reached("EKS") { vec![3, 5, 7] } else { vec![7] };
    let level = if reached("EL2") {
        vec![1, 2, 3, 4, 5, 6, 7]
    } else if reached("EL1") {
        vec![3, 5, 6, 7]
    } else {
        vec![7]
    };
    let height = match ["EH1", "EH2", "EH3", "EH4"].iter().filter(|p| reached(p)).count() {
        0 => vec![5],
        1 => vec![4, 5],
        2 => vec![3, 4, 5],
        3 => vec![2, 3, 4, 5],
        _ => vec![1, 2, 3, 4, 5],
    };
    let depth = if reached("ED2") {
        vec![2, 3, 4]
    } else if reached("ED1") {
        vec![3, 4]
    } else {
        vec![4]
    };
    let width = if reached("EW2") {
        vec![3, 4, 6]
    } else if reached("EW1") {
        vec![4, 6]
    } else {
        vec![6]
    };
    (kernel, level, height, depth, width)
}
