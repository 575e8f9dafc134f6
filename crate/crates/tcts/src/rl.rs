//! Reinforcement-stage reward computation.
//!
//! The baseline reward is self-critical: the sampled caption's CIDEr minus
//! the greedy caption's CIDEr. The teacher-critical adjustment splits the
//! sampled words into an appropriate set (inside the LCS with the teacher
//! caption) and an inaccurate set (outside it), and shifts their rewards in
//! opposite directions. The shift is normalized so one caption's
//! adjustments sum to zero: the expected-CIDEr objective is untouched while
//! credit moves from inaccurate words to appropriate ones.
//!
//! EOS is not a word, so the partition never covers it; when the sampled
//! caption actually emitted EOS, that position is treated as in-LCS (the
//! teacher caption terminates too) and counted in `n`, which keeps the
//! zero-sum and mean-preservation guarantees exact over the whole emission
//! sequence.

use thiserror::Error;

use crate::autodiff::{Tape, ValueId};
use crate::model::ModelError;
use crate::text::LcsPartition;

#[derive(Debug, Error, PartialEq)]
pub enum RlError {
    #[error("caption has no rewardable positions")]
    DegenerateCaption,
    #[error("shape mismatch: {0} log-probabilities vs {1} rewards")]
    ShapeMismatch(usize, usize),
}

/// Self-critical baseline reward.
pub fn scst_reward(cider_sample: f64, cider_greedy: f64) -> f64 {
    cider_sample - cider_greedy
}

/// Normalized per-class adjustments for a caption with `n` appropriate and
/// `m` inaccurate positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TctsAdjustment {
    pub eta: f64,
    pub r_appr: f64,
    pub r_inac: f64,
    pub n: usize,
    pub m: usize,
}

/// `eta = (n-m)/(n+m) * C`, `r_appr = C - eta`, `r_inac = -C - eta`.
///
/// By construction `n*r_appr + m*r_inac = 0`.
pub fn tcts_adjustment(n: usize, m: usize, cider_teacher: f64) -> Result<TctsAdjustment, RlError> {
    if n + m == 0 {
        return Err(RlError::DegenerateCaption);
    }
    debug_assert!(cider_teacher >= 0.0);
    let eta = (n as f64 - m as f64) / (n as f64 + m as f64) * cider_teacher;
    Ok(TctsAdjustment {
        eta,
        r_appr: cider_teacher - eta,
        r_inac: -cider_teacher - eta,
        n,
        m,
    })
}

/// Adjustment for a sampled emission sequence: the word-level partition
/// plus, when EOS was emitted, one extra in-LCS position. Using these
/// counts makes the adjustments over the full reward vector sum to zero.
pub fn tcts_adjustment_for(
    partition: &LcsPartition,
    emitted_eos: bool,
    cider_teacher: f64,
) -> Result<TctsAdjustment, RlError> {
    tcts_adjustment(partition.n + emitted_eos as usize, partition.m, cider_teacher)
}

/// Per-emission rewards for a sampled caption, EOS included when emitted.
/// The mean equals the SCST scalar whenever `adj` was built from matching
/// counts (see [`tcts_adjustment_for`]).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn constant(value: f64, len: usize) -> RewardVector {
        RewardVector(vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// Word `t` receives `scst + lambda2 * (r_appr | r_inac)` according to the
/// partition mask; an emitted EOS receives the appropriate-class reward so
/// termination is never punished by the adjustment.
pub fn tcts_reward_vector(
    partition: &LcsPartition,
    emitted_eos: bool,
    scst: f64,
    adj: &TctsAdjustment,
    lambda2: f64,
) -> RewardVector {
    assert!(lambda2 >= 0.0, "lambda2 must be non-negative");
    let mut rewards = Vec::with_capacity(partition.in_lcs.len() + emitted_eos as usize);
    for &inside in &partition.in_lcs {
        let adjust = if inside { adj.r_appr } else { adj.r_inac };
        rewards.push(scst + lambda2 * adjust);
    }
    if emitted_eos {
        rewards.push(scst + lambda2 * adj.r_appr);
    }
    RewardVector(rewards)
}

/// Policy-gradient surrogate `-sum_t rewards[t] * log_probs[t]`; rewards
/// are constants, so minimizing reproduces the REINFORCE gradient with
/// per-word credit.
pub fn pg_loss(log_probs: &[f64], rewards: &RewardVector) -> Result<f64, RlError> {
    if log_probs.len() != rewards.len() {
        return Err(RlError::ShapeMismatch(log_probs.len(), rewards.len()));
    }
    Ok(-log_probs
        .iter()
        .zip(&rewards.0)
        .map(|(lp, r)| r * lp)
        .sum::<f64>())
}

/// Tape form of [`pg_loss`] over per-step log-probability nodes.
pub fn build_pg_loss(
    tape: &mut Tape,
    log_probs: &[ValueId],
    rewards: &RewardVector,
) -> Result<ValueId, ModelError> {
    if log_probs.len() != rewards.len() {
        return Err(ModelError::Ad(crate::autodiff::AdError::ShapeMismatch {
            op: "pg_loss",
            detail: format!("{} log-probs vs {} rewards", log_probs.len(), rewards.len()),
        }));
    }
    let mut total: Option<ValueId> = None;
    for (&lp, &r) in log_probs.iter().zip(&rewards.0) {
        let term = tape.scale(lp, r)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one emission");
    Ok(tape.scale(total, -1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scst_reward_is_plain_subtraction() {
        assert!((scst_reward(1.2, 1.0) - 0.2).abs() < 1e-12);
        assert_eq!(scst_reward(1.0, 1.0), 0.0);
        assert_eq!(scst_reward(0.0, 10.0), -10.0);
    }

    #[test]
    fn adjustment_hand_values() {
        let adj = tcts_adjustment(3, 1, 1.0).unwrap();
        assert!((adj.eta - 0.5).abs() < 1e-12);
        assert!((adj.r_appr - 0.5).abs() < 1e-12);
        assert!((adj.r_inac + 1.5).abs() < 1e-12);
        assert!((3.0 * adj.r_appr + 1.0 * adj.r_inac).abs() < 1e-12);
    }

    #[test]
    fn adjustment_symmetric_counts_zero_eta() {
        let adj = tcts_adjustment(2, 2, 0.7).unwrap();
        assert_eq!(adj.eta, 0.0);
        assert_eq!(adj.r_appr, 0.7);
        assert_eq!(adj.r_inac, -0.7);
    }

    #[test]
    fn adjustment_degenerate_ends_cancel() {
        let all_in = tcts_adjustment(4, 0, 0.9).unwrap();
        assert!((all_in.eta - 0.9).abs() < 1e-12);
        assert!(all_in.r_appr.abs() < 1e-12);
        let all_out = tcts_adjustment(0, 4, 0.9).unwrap();
        assert!((all_out.eta + 0.9).abs() < 1e-12);
        assert!(all_out.r_inac.abs() < 1e-12);
    }

    #[test]
    fn adjustment_rejects_empty_captions() {
        assert_eq!(tcts_adjustment(0, 0, 1.0), Err(RlError::DegenerateCaption));
    }

    fn partition(mask: &[bool]) -> LcsPartition {
        LcsPartition {
            in_lcs: mask.to_vec(),
            n: mask.iter().filter(|&&b| b).count(),
            m: mask.iter().filter(|&&b| !b).count(),
        }
    }

    #[test]
    fn reward_vector_hand_values() {
        // n=3, m=1, C=1.0, scst=0.2, lambda2=0.02: appropriate words get
        // 0.21 and the inaccurate word gets 0.17.
        let p = partition(&[true, true, false, true]);
        let adj = tcts_adjustment(3, 1, 1.0).unwrap();
        let rewards = tcts_reward_vector(&p, false, 0.2, &adj, 0.02);
        assert_eq!(rewards.len(), 4);
        for (i, &r) in rewards.0.iter().enumerate() {
            let expected = if p.in_lcs[i] { 0.21 } else { 0.17 };
            assert!((r - expected).abs() < 1e-12, "position {i}: {r}");
        }
    }

    #[test]
    fn lambda2_zero_recovers_pure_scst_bitwise() {
        let p = partition(&[true, false, true]);
        let adj = tcts_adjustment_for(&p, true, 3.7).unwrap();
        let rewards = tcts_reward_vector(&p, true, 0.43, &adj, 0.0);
        for &r in &rewards.0 {
            assert_eq!(r.to_bits(), 0.43f64.to_bits());
        }
    }

    #[test]
    fn mean_preservation_with_matching_counts() {
        let p = partition(&[true, false, false, true, true]);
        let scst = -0.8;
        for emitted_eos in [false, true] {
            let adj = tcts_adjustment_for(&p, emitted_eos, 2.3).unwrap();
            let rewards = tcts_reward_vector(&p, emitted_eos, scst, &adj, 0.02);
            assert_eq!(rewards.len(), 5 + emitted_eos as usize);
            assert!((rewards.mean() - scst).abs() < 1e-9);
        }
    }

    #[test]
    fn pg_loss_hand_values() {
        let rewards = RewardVector(vec![0.0, 0.0]);
        assert_eq!(pg_loss(&[-0.5, -1.0], &rewards).unwrap(), 0.0);

        let constant = RewardVector::constant(0.7, 3);
        let lps = [-0.2, -0.4, -0.1];
        let loss = pg_loss(&lps, &constant).unwrap();
        assert!((loss - 0.7 * 0.7).abs() < 1e-12);

        assert_eq!(
            pg_loss(&[-0.5], &RewardVector(vec![1.0, 2.0])),
            Err(RlError::ShapeMismatch(1, 2))
        );
    }

    #[test]
    fn tape_pg_loss_matches_value_level() {
        use crate::autodiff::{Tape, Tensor};
        let mut tape = Tape::new();
        let lps = [-0.3, -1.2, -0.05];
        let nodes: Vec<_> = lps
            .iter()
            .map(|&lp| tape.leaf(Tensor::scalar(lp)))
            .collect();
        let rewards = RewardVector(vec![0.5, -0.2, 1.5]);
        let node = build_pg_loss(&mut tape, &nodes, &rewards).unwrap();
        let direct = pg_loss(&lps, &rewards).unwrap();
        assert!((tape.value(node).item() - direct).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn zero_sum_property(n in 0usize..40, m in 0usize..40, c in 0.0f64..10.0) {
            prop_assume!(n + m >= 1);
            let adj = tcts_adjustment(n, m, c).unwrap();
            let residual = n as f64 * adj.r_appr + m as f64 * adj.r_inac;
            prop_assert!(residual.abs() < 1e-9);
        }

        #[test]
        fn appropriate_reward_dominates_inaccurate(
            n in 0usize..40, m in 0usize..40, c in 0.0f64..10.0,
        ) {
            prop_assume!(n + m >= 1);
            let adj = tcts_adjustment(n, m, c).unwrap();
            prop_assert!(adj.r_appr >= adj.r_inac);
            prop_assert!((adj.r_appr - adj.r_inac - 2.0 * c).abs() < 1e-9);
        }

        #[test]
        fn mean_preservation_property(
            mask in proptest::collection::vec(any::<bool>(), 1..=16),
            emitted_eos in any::<bool>(),
            scst in -3.0f64..3.0,
            c in 0.0f64..10.0,
            lambda2 in 0.0f64..0.1,
        ) {
            let p = partition(&mask);
            let adj = tcts_adjustment_for(&p, emitted_eos, c).unwrap();
            let rewards = tcts_reward_vector(&p, emitted_eos, scst, &adj, lambda2);
            prop_assert!((rewards.mean() - scst).abs() < 1e-9);
        }
    }
}
