//! Cross-entropy training objectives: hard-label XE, teacher soft-label KL,
//! and their weighted combination.
//!
//! Each loss exists twice: as a plain value-level function (used for
//! reporting and tests) and as a tape builder producing the differentiable
//! node the optimizer needs. The two routes are pinned against each other
//! and against finite differences in tests.
//!
//! The KL term is implemented as the positive divergence `KL(q || p)` of
//! the student distribution `p` from the detached teacher distribution `q`;
//! adding it pulls the student toward the teacher's soft proposal.

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, ValueId, LOG_FLOOR};
use crate::data::DatasetRecord;
use crate::model::{encode_record, forced_rollout, ModelError, ModelParams, RecordInput};
use crate::text::{Caption, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Per-step teacher distributions, detached from any gradient graph.
/// Row `t` is the teacher's word distribution after consuming the same
/// prefix the student sees at step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub rows: Vec<Vec<f64>>,
}

/// Mean negative log-likelihood of the target ids under the per-step
/// distributions.
pub fn xe_loss(dists: &[Vec<f64>], targets: &[usize]) -> Result<f64, LossError> {
    if dists.len() != targets.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} distributions vs {} targets",
            dists.len(),
            targets.len()
        )));
    }
    let total: f64 = dists
        .iter()
        .zip(targets)
        .map(|(p, &y)| -p[y].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / targets.len() as f64)
}

/// Mean per-step `KL(q || p)` between teacher rows `q` and student rows `p`.
pub fn kl_loss(dists: &[Vec<f64>], soft: &SoftTargets) -> Result<f64, LossError> {
    if dists.len() != soft.rows.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} distributions vs {} soft-target rows",
            dists.len(),
            soft.rows.len()
        )));
    }
    let mut total = 0.0;
    for (p, q) in dists.iter().zip(&soft.rows) {
        if p.len() != q.len() {
            return Err(LossError::ShapeMismatch(format!(
                "row width {} vs {}",
                p.len(),
                q.len()
            )));
        }
        total += q
            .iter()
            .zip(p)
            .map(|(&qi, &pi)| {
                if qi > 0.0 {
                    qi * (qi.ln() - pi.max(LOG_FLOOR).ln())
                } else {
                    0.0
                }
            })
            .sum::<f64>();
    }
    Ok(total / dists.len() as f64)
}

/// The teacher-critical XE objective: `xe + lambda1 * kl`.
pub fn combined_xe_tcts(xe: f64, kl: f64, lambda1: f64) -> f64 {
    assert!(lambda1 >= 0.0, "lambda1 must be non-negative");
    xe + lambda1 * kl
}

/// Tape form of [`xe_loss`] over per-step distribution nodes.
pub fn build_xe_loss(
    tape: &mut Tape,
    dists: &[ValueId],
    targets: &[usize],
) -> Result<ValueId, ModelError> {
    assert_eq!(dists.len(), targets.len(), "steps and targets must align");
    let mut total: Option<ValueId> = None;
    for (&dist, &y) in dists.iter().zip(targets) {
        let picked = tape.gather_row(dist, y)?;
        let lp = tape.log(picked)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, -1.0 / targets.len() as f64)?)
}

/// Tape form of [`kl_loss`]. Teacher rows are constants; only the student
/// distributions carry gradients, so minimizing this pulls `p` toward `q`.
pub fn build_kl_loss(
    tape: &mut Tape,
    dists: &[ValueId],
    soft: &SoftTargets,
) -> Result<ValueId, ModelError> {
    assert_eq!(dists.len(), soft.rows.len(), "steps and soft targets must align");
    let mut total: Option<ValueId> = None;
    for (&dist, q) in dists.iter().zip(&soft.rows) {
        // sum_i q_i ln q_i is constant with respect to the student.
        let q_entropy: f64 = q
            .iter()
            .map(|&qi| if qi > 0.0 { qi * qi.ln() } else { 0.0 })
            .sum();
        let qconst = tape.leaf(Tensor::vector(q.clone()));
        let logp = tape.log(dist)?;
        let weighted = tape.mul(qconst, logp)?;
        let cross = tape.sum(weighted)?;
        let neg_cross = tape.scale(cross, -1.0)?;
        let ent = tape.leaf(Tensor::scalar(q_entropy));
        let step_kl = tape.add(ent, neg_cross)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, step_kl)?,
            None => step_kl,
        });
    }
    let total = total.expect("at least one step");
    Ok(tape.scale(total, 1.0 / soft.rows.len() as f64)?)
}

/// Tape form of [`combined_xe_tcts`].
pub fn build_combined_loss(
    tape: &mut Tape,
    xe: ValueId,
    kl: ValueId,
    lambda1: f64,
) -> Result<ValueId, ModelError> {
    assert!(lambda1 >= 0.0, "lambda1 must be non-negative");
    let weighted = tape.scale(kl, lambda1)?;
    Ok(tape.add(xe, weighted)?)
}

/// Runs the frozen teacher over the ground-truth caption and collects its
/// per-step distributions as constants. With identical (record, prefix)
/// inputs the rows are identical, which is what lets the soft labels absorb
/// prefix misalignment.
pub fn soft_targets_from_teacher(
    record: &DatasetRecord,
    vocab: &Vocab,
    teacher: &ModelParams,
    gt_caption: &Caption,
) -> Result<SoftTargets, ModelError> {
    let input = RecordInput::from_record(record, vocab)?;
    soft_targets_from_teacher_input(&input, teacher, gt_caption)
}

/// [`soft_targets_from_teacher`] over already-resolved inputs.
pub fn soft_targets_from_teacher_input(
    input: &RecordInput,
    teacher: &ModelParams,
    gt_caption: &Caption,
) -> Result<SoftTargets, ModelError> {
    let mut tape = Tape::new();
    let nodes = teacher.register(&mut tape);
    let scene = encode_record(&mut tape, &nodes, input)?;
    let dists = forced_rollout(&mut tape, &nodes, &scene, gt_caption)?;
    Ok(SoftTargets {
        rows: dists
            .into_iter()
            .map(|d| tape.value(d).data().to_vec())
            .collect(),
    })
}
