//! CSV emission for the diagnostic tables. Plots live outside this
//! toolkit; these files are the interchange point.

use purekit_core::langevin::TrajectoryRecord;

/// Trajectory distances, one row per recorded step.
/// Columns: step, d_cp (clean vs its purification), d_cpp (clean vs the
/// poisoned image's purification), d_ppp (poisoned vs its purification).
pub fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let mut out = String::from("step,d_cp,d_cpp,d_ppp\n");
    for i in 0..record.steps.len() {
        out += &format!(
            "{},{},{},{}\n",
            record.steps[i],
            record.d_clean_pure[i],
            record.d_clean_poisonpure[i],
            record.d_poison_poisonpure[i]
        );
    }
    out
}

/// Lyapunov estimates per noise scale, one row per (eta, lambda) pair.
pub fn lyapunov_csv(rows: &[(f32, f64)]) -> String {
    let mut out = String::from("eta,lambda\n");
    for (eta, lambda) in rows {
        out += &format!("{eta},{lambda}\n");
    }
    out
}

/// Training log, one row per recorded step.
pub fn train_log_csv(rows: &[(u64, f32, f32, f32)]) -> String {
    let mut out = String::from("step,e_pos,e_neg,gnorm\n");
    for (step, e_pos, e_neg, gnorm) in rows {
        out += &format!("{step},{e_pos},{e_neg},{gnorm}\n");
    }
    out
}

// ── Tests ────────────────────────────────────────────────────────────────────
