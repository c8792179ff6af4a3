use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub target_train: usize,
    pub surrogate_train: usize,
    /// Members and non-members in the evaluation panel, each.
    pub eval_per_side: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            target_train: 1000,
            surrogate_train: 1000,
            eval_per_side: 200,
        }
    }
}

/// Index sets into one dataset.
///
/// `holdout` is everything neither model trained on and not used as an eval
/// non-member; it serves test-accuracy measurement, tau calibration and
/// baseline shadow data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_train: Vec<usize>,
    pub surrogate_train: Vec<usize>,
    pub eval_members: Vec<usize>,
    pub eval_nonmembers: Vec<usize>,
    pub holdout: Vec<usize>,
}

pub fn make_split(n: usize, sizes: SplitSizes, seed: u64) -> Result<SplitPlan> {
    let SplitSizes {
        target_train,
        surrogate_train,
        eval_per_side,
    } = sizes;
    let needed = target_train + surrogate_train + eval_per_side;
    if needed > n || eval_per_side > target_train {
        return Err(Error::invalid(format!(
            "split infeasible: {target_train} target + {surrogate_train} surrogate + {eval_per_side} \
             held-out non-members from {n} samples (eval members must also fit in target-train)"
        )));
    }
    let mut rng = stage_rng(seed, "split");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let target: Vec<usize> = perm[..target_train].to_vec();
    let surrogate = perm[target_train..target_train + surrogate_train].to_vec();
    let pool = &perm[target_train + surrogate_train..];

    let mut members = target.clone();
    members.shuffle(&mut rng);
    members.truncate(eval_per_side);
    let plan = SplitPlan {
        target_train: target,
        surrogate_train: surrogate,
        eval_members: members,
        eval_nonmembers: pool[..eval_per_side].to_vec(),
        holdout: pool[eval_per_side..].to_vec(),
    };
    plan.check()?;
    Ok(plan)
}

impl SplitPlan {
    /// Exhaustive disjointness and containment check.
    pub fn check(&self) -> Result<()> {
        let target: HashSet<usize> = self.target_train.iter().copied().collect();
        let surrogate: HashSet<usize> = self.surrogate_train.iter().copied().collect();
        if target.len() != self.target_train.len() || surrogate.len() != self.surrogate_train.len() {
            return Err(Error::Integrity("duplicate index in a training split".into()));
        }
        if let Some(i) = target.intersection(&surrogate).next() {
            return Err(Error::Integrity(format!("index {i} in both target and surrogate training sets")));
        }
        if let Some(i) = self.eval_members.iter().find(|i| !target.contains(i)) {
            return Err(Error::Integrity(format!("eval member {i} not in target-train")));
        }
        if let Some(i) = self
            .eval_nonmembers
            .iter()
            .chain(&self.holdout)
            .find(|i| target.contains(i) || surrogate.contains(i))
        {
            return Err(Error::Integrity(format!("held-out index {i} was used for training")));
        }
        if self.eval_members.len() != self.eval_nonmembers.len() {
            return Err(Error::Integrity(format!(
                "unbalanced eval panel: {} members vs {} non-members",
                self.eval_members.len(),
                self.eval_nonmembers.len()
            )));
        }
        Ok(())
    }

    /// Panel indices (members first) with their membership flags.
    pub fn panel(&self) -> Vec<(usize, bool)> {
        self.eval_members
            .iter()
            .map(|&i| (i, true))
            .chain(self.eval_nonmembers.iter().map(|&i| (i, false)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjointness_holds() {
        let sizes = SplitSizes {
            target_train: 400,
            surrogate_train: 400,
            eval_per_side: 100,
        };
        let plan = make_split(1000, sizes, 3).unwrap();
        plan.check().unwrap();
        assert_eq!(plan.eval_members.len(), 100);
        assert_eq!(plan.holdout.len(), 100);
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let sizes = SplitSizes {
            target_train: 600,
            surrogate_train: 600,
            eval_per_side: 10,
        };
        assert!(make_split(1000, sizes, 0).is_err());
    }

    #[test]
    fn seeds_change_the_panel() {
        let sizes = SplitSizes {
            target_train: 400,
            surrogate_train: 400,
            eval_per_side: 100,
        };
        let a = make_split(1000, sizes, 1).unwrap();
        let b = make_split(1000, sizes, 2).unwrap();
        let sa: HashSet<_> = a.eval_members.iter().collect();
        let overlap = b.eval_members.iter().filter(|i| sa.contains(i)).count();
        assert!(overlap < 100);
    }
}
