//! Hard per-task compute accounting.
//!
//! One unit is one forward-backward pass at the reference batch size. The
//! accountant rejects any charge that would push `spent` past `total` — no
//! partial charges — so a training loop that only advances through
//! [`BudgetAccountant::charge`] can never overdraw. Evaluation passes are
//! never charged; the budget governs training.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Charged operation kinds. Dual-view ops (two augmented views through two
/// towers per step) cost twice a plain step, which is why a contrastive
/// method gets half the gradient steps from the same allowance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    SingleViewStep,
    DualViewStep,
    ImportanceEstimationStep,
}

impl OpKind {
    pub fn cost(self) -> u64 {
        match self {
            OpKind::SingleViewStep => 1,
            OpKind::DualViewStep => 2,
            OpKind::ImportanceEstimationStep => 1,
        }
    }
}

/// Which training phase a ledger entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTag {
    /// Joint labeled + unlabeled + buffer optimization.
    Joint,
    /// Buffer-only fine-tuning after the joint phase.
    Finetune,
    /// Single-phase supervised training (baselines).
    Train,
    /// Reconstruction-only pretraining (two-stage baseline).
    Pretrain,
    /// Post-task parameter-importance estimation.
    Importance,
}

/// Batch composition charged with an entry; used to audit which data
/// sources a phase touched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub buffer: usize,
}

impl SourceCounts {
    pub fn buffer_only(n: usize) -> Self {
        Self { labeled: 0, unlabeled: 0, buffer: n }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub phase: PhaseTag,
    pub op: OpKind,
    pub units: u64,
    pub cumulative: u64,
    #[serde(default)]
    pub sources: SourceCounts,
}

/// Hard ledger of compute units for one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BudgetAccountant {
    total: u64,
    spent: u64,
    ledger: Vec<LedgerEntry>,
}

impl BudgetAccountant {
    pub fn new(total: u64) -> Self {
        Self { total, spent: 0, ledger: Vec::new() }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn spent(&self) -> u64 {
        self.spent
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.spent
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Whether `count` ops of `op` would fit in the remaining allowance.
    pub fn can_afford(&self, op: OpKind, count: u64) -> bool {
        op.cost().saturating_mul(count) <= self.remaining()
    }

    /// Charge `count` ops of kind `op`. Rejects the whole charge if it would
    /// exceed the total; the ledger is untouched on rejection.
    pub fn charge(&mut self, phase: PhaseTag, op: OpKind, count: u64, sources: SourceCounts) -> Result<()> {
        if count == 0 {
            return Err(Error::Contract("charge count must be >= 1".into()));
        }
        let units = op.cost() * count;
        if self.spent + units > self.total {
            return Err(Error::BudgetExhausted {
                spent: self.spent,
                total: self.total,
                requested: units,
            });
        }
        self.spent += units;
        self.ledger.push(LedgerEntry {
            phase,
            op,
            units,
            cumulative: self.spent,
            sources,
        });
        Ok(())
    }

    /// Ledger-summed units; always equals `spent`.
    pub fn ledger_total(&self) -> u64 {
        self.ledger.iter().map(|e| e.units).sum()
    }

    pub fn units_in_phase(&self, phase: PhaseTag) -> u64 {
        self.ledger
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.units)
            .sum()
    }
}

/// Split of one task's budget into the joint stage and the buffer-only
/// fine-tune stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: u64,
    pub joint: u64,
    pub finetune: u64,
    pub threshold: u64,
}

/// Allocate up to `threshold` units to the joint stage; everything beyond
/// goes solely to buffer fine-tuning.
pub fn split_budget(total: u64, threshold: u64) -> Result<BudgetPlan> {
    if total < 1 {
        return Err(Error::Config("budget total must be >= 1".into()));
    }
    if threshold < 1 {
        return Err(Error::Config("budget threshold must be >= 1".into()));
    }
    let joint = total.min(threshold);
    Ok(BudgetPlan { total, joint, finetune: total - joint, threshold })
}

/// Pick the threshold whose run maximizes average accuracy up to task
/// `validation_tasks`; ties break toward the smaller candidate. The runner
/// is called once per candidate as `runner(threshold, validation_tasks)` and
/// returns that average accuracy.
pub fn select_threshold<E, F>(
    candidates: &[u64],
    validation_tasks: usize,
    mut runner: F,
) -> std::result::Result<u64, E>
where
    F: FnMut(u64, usize) -> std::result::Result<f64, E>,
    E: From<Error>,
{
    if candidates.is_empty() {
        return Err(Error::Config("no threshold candidates".into()).into());
    }
    if validation_tasks < 1 {
        return Err(Error::Config("validation_tasks must be >= 1".into()).into());
    }
    let mut ordered: Vec<u64> = candidates.to_vec();
    ordered.sort_unstable();
    let mut best = ordered[0];
    let mut best_acc = f64::NEG_INFINITY;
    for &cand in &ordered {
        let acc = runner(cand, validation_tasks)?;
        if acc > best_acc {
            best_acc = acc;
            best = cand;
        }
    }
    Ok(best)
}
