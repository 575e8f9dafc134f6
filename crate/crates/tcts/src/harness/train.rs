//! Training orchestration: data context, the XE and RL loops, evaluation
//! and the teacher-as-ground-truth ablation.
//!
//! Determinism contract: every random decision is drawn from an RNG derived
//! from (seed, purpose label, epoch/record stream), never from a shared
//! sequential stream, so batch items can run in parallel without changing
//! results. Gradients are reduced in item order and the parameter update is
//! the only exclusive section.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{GradMap, Tape};
use crate::data::{derived_rng, read_jsonl, DatasetRecord, Split};
use crate::losses::{
    build_combined_loss, build_kl_loss, build_xe_loss, soft_targets_from_teacher_input,
};
use crate::metrics::{cider, IdfTable, MetricReport};
use crate::model::{
    encode_record, greedy_decode_input, sample_rollout, ModelConfig, ModelParams, RecordInput,
};
use crate::rl::{
    build_pg_loss, scst_reward, tcts_adjustment_for, tcts_reward_vector, RewardVector, RlError,
};
use crate::text::{lcs_partition, tokenize, Caption, Vocab};

use super::checkpoint;
use super::config::{sha256_hex, ExperimentConfig, HarnessError, Mode};
use super::report::{EpochRow, TrainReport};

/// Global-norm gradient clip; REINFORCE variance at toy scale destabilizes
/// runs without it.
pub const GRAD_CLIP_NORM: f64 = 5.0;

const DEFAULT_RL_LR: f64 = 0.02;

/// A dataset with its derived vocabulary, encoded references and resolved
/// model inputs.
pub struct DataContext {
    pub records: Vec<DatasetRecord>,
    pub vocab: Vocab,
    pub vocab_hash: String,
    /// Encoded reference captions per record (same indexing as `records`).
    pub refs: Vec<Vec<Caption>>,
    pub inputs: Vec<RecordInput>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// References longer than `max_len`; truncation is flagged, not silent.
    pub truncated_refs: usize,
}

impl DataContext {
    pub fn load(path: &Path, min_count: usize, max_len: usize) -> Result<DataContext, HarnessError> {
        let records = read_jsonl(path)?;
        DataContext::from_records(records, min_count, max_len)
    }

    pub fn from_records(
        records: Vec<DatasetRecord>,
        min_count: usize,
        max_len: usize,
    ) -> Result<DataContext, HarnessError> {
        if records.is_empty() {
            return Err(HarnessError::DataContract("dataset is empty".into()));
        }
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.refs.is_empty() {
                return Err(HarnessError::DataContract(format!(
                    "record {} has no references",
                    rec.id
                )));
            }
            if rec.objects.is_empty() {
                return Err(HarnessError::DataContract(format!(
                    "record {} has no objects",
                    rec.id
                )));
            }
            match rec.split {
                Split::Train => train_idx.push(i),
                Split::Val => val_idx.push(i),
                Split::Test => test_idx.push(i),
            }
        }
        if train_idx.is_empty() {
            return Err(HarnessError::DataContract("no training records".into()));
        }

        let tokenized: Vec<Vec<Vec<String>>> = records
            .iter()
            .map(|rec| {
                rec.refs
                    .iter()
                    .map(|r| {
                        tokenize(r).map_err(|e| {
                            HarnessError::DataContract(format!("record {}: {e}", rec.id))
                        })
                    })
                    .collect::<Result<_, _>>()
            })
            .collect::<Result<_, _>>()?;

        let train_tokens: Vec<Vec<String>> = train_idx
            .iter()
            .flat_map(|&i| tokenized[i].iter().cloned())
            .collect();
        let vocab = Vocab::build(&train_tokens, min_count);
        let vocab_hash = hash_vocab(&vocab);

        let mut truncated_refs = 0;
        let refs: Vec<Vec<Caption>> = tokenized
            .iter()
            .map(|sets| {
                sets.iter()
                    .map(|toks| {
                        let (caption, truncated) = vocab.encode(toks, max_len);
                        if truncated {
                            truncated_refs += 1;
                        }
                        caption
                    })
                    .collect()
            })
            .collect();

        let inputs: Vec<RecordInput> = records
            .iter()
            .map(|rec| RecordInput::from_record(rec, &vocab).map_err(HarnessError::from))
            .collect::<Result<_, _>>()?;

        Ok(DataContext {
            records,
            vocab,
            vocab_hash,
            refs,
            inputs,
            train_idx,
            val_idx,
            test_idx,
            truncated_refs,
        })
    }

    pub fn split_idx(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Val => &self.val_idx,
            Split::Test => &self.test_idx,
        }
    }

    /// Document-frequency table over the reference sets of the given
    /// records.
    pub fn idf_for(&self, idxs: &[usize]) -> Result<IdfTable, HarnessError> {
        let sets: Vec<Vec<Caption>> = idxs.iter().map(|&i| self.refs[i].clone()).collect();
        Ok(IdfTable::build(&sets)?)
    }
}

fn hash_vocab(vocab: &Vocab) -> String {
    let mut joined = String::new();
    for id in 0..vocab.size() {
        joined.push_str(vocab.token_of(id).unwrap());
        joined.push('\n');
    }
    sha256_hex(joined.as_bytes())
}

/// Greedy-decodes each record and scores it against its references.
/// Returns per-record reports (in `idxs` order) and their arithmetic mean.
pub fn evaluate(
    params: &ModelParams,
    ctx: &DataContext,
    idxs: &[usize],
) -> Result<(Vec<(u64, MetricReport)>, MetricReport), HarnessError> {
    let idf = ctx.idf_for(idxs)?;
    let rows: Vec<(u64, MetricReport)> = idxs
        .par_iter()
        .map(|&i| -> Result<(u64, MetricReport), HarnessError> {
            let caption = greedy_decode_input(&ctx.inputs[i], params, params.cfg.max_len)?;
            let report = MetricReport::score(&caption, &ctx.refs[i], &idf)?;
            Ok((ctx.records[i].id, report))
        })
        .collect::<Result<_, _>>()?;
    let reports: Vec<MetricReport> = rows.iter().map(|(_, m)| *m).collect();
    Ok((rows, MetricReport::mean(&reports)))
}

fn stream(epoch: usize, id: u64) -> u64 {
    ((epoch as u64) << 32) | (id & 0xffff_ffff)
}

fn accumulate_grads(total: &mut Option<GradMap>, item: &GradMap) {
    match total {
        None => *total = Some(item.clone()),
        Some(acc) => {
            for (name, grad) in acc.iter_mut() {
                let other = &item[name];
                for (a, b) in grad.data_mut().iter_mut().zip(other.data()) {
                    *a += b;
                }
            }
        }
    }
}

fn scale_grads(grads: &mut GradMap, factor: f64) {
    for grad in grads.values_mut() {
        for g in grad.data_mut() {
            *g *= factor;
        }
    }
}

fn clip_grads(grads: &mut GradMap, max_norm: f64) {
    let ss: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = ss.sqrt();
    if norm > max_norm {
        scale_grads(grads, max_norm / norm);
    }
}

struct EpochStats {
    /// Mean per-item metric for the epoch (loss or reward).
    item_mean: f64,
    step_losses: Vec<f64>,
}

/// Teacher-forced training; with a soft teacher the KL term is added at
/// weight `lambda1`. One reference per record is drawn per epoch.
pub fn train_xe(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    mut params: ModelParams,
    soft_teacher: Option<&ModelParams>,
    lambda1: f64,
    epochs: usize,
    base_lr: f64,
) -> Result<(ModelParams, TrainReport), HarnessError> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(epochs);
    let mut step_losses = Vec::new();

    for epoch in 0..epochs {
        let lr = cfg.lr_at(base_lr, epoch, epochs);
        let stats = xe_epoch(cfg, ctx, &mut params, soft_teacher, lambda1, epoch, lr)?;
        step_losses.extend_from_slice(&stats.step_losses);
        let (_, val) = evaluate(&params, ctx, &ctx.val_idx)?;
        rows.push(EpochRow {
            epoch: epoch + 1,
            train_metric: stats.item_mean,
            val,
        });
    }

    let (_, test) = evaluate(&params, ctx, &ctx.test_idx)?;
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        rows,
        test,
        wall_time_s: start.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        step_losses,
    };
    Ok((params, report))
}

fn xe_epoch(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    params: &mut ModelParams,
    soft_teacher: Option<&ModelParams>,
    lambda1: f64,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats, HarnessError> {
    use rand::seq::SliceRandom;
    let mut order = ctx.train_idx.clone();
    order.shuffle(&mut derived_rng(cfg.seed, "xe-shuffle", epoch as u64));

    let mut step_losses = Vec::new();
    let mut loss_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &*params;
        let results: Vec<(f64, GradMap)> = batch
            .par_iter()
            .map(|&ri| xe_item(cfg, ctx, snapshot, soft_teacher, lambda1, epoch, ri))
            .collect::<Result<_, _>>()?;

        let mut grads: Option<GradMap> = None;
        for (loss, g) in &results {
            loss_sum += loss;
            accumulate_grads(&mut grads, g);
        }
        let mut grads = grads.expect("non-empty batch");
        scale_grads(&mut grads, 1.0 / results.len() as f64);
        clip_grads(&mut grads, GRAD_CLIP_NORM);
        params.apply_grads(&grads, lr);
        step_losses.push(results.iter().map(|(l, _)| l).sum::<f64>() / results.len() as f64);
    }
    Ok(EpochStats {
        item_mean: loss_sum / ctx.train_idx.len() as f64,
        step_losses,
    })
}

fn xe_item(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    params: &ModelParams,
    soft_teacher: Option<&ModelParams>,
    lambda1: f64,
    epoch: usize,
    ri: usize,
) -> Result<(f64, GradMap), HarnessError> {
    let record = &ctx.records[ri];
    let mut rng = derived_rng(cfg.seed, "xe-ref", stream(epoch, record.id));
    let gt = &ctx.refs[ri][rng.gen_range(0..ctx.refs[ri].len())];
    let targets = gt.emission_targets();

    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let scene = encode_record(&mut tape, &nodes, &ctx.inputs[ri])?;
    let dists = crate::model::forced_rollout(&mut tape, &nodes, &scene, gt)?;
    let xe_node = build_xe_loss(&mut tape, &dists, &targets)?;
    let loss_node = match soft_teacher {
        Some(teacher) => {
            let soft = soft_targets_from_teacher_input(&ctx.inputs[ri], teacher, gt)?;
            let kl_node = build_kl_loss(&mut tape, &dists, &soft)?;
            build_combined_loss(&mut tape, xe_node, kl_node, lambda1)?
        }
        None => xe_node,
    };
    let grads = tape.backward(loss_node)?;
    Ok((tape.value(loss_node).item(), grads))
}

/// Self-critical training; with a critic teacher the per-word rewards are
/// shifted by the LCS partition against the teacher caption at weight
/// `lambda2`. `reward_refs` substitutes the reference sets used for
/// rewards (evaluation always uses the true references).
pub fn train_rl(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    mut params: ModelParams,
    critic_teacher: Option<&ModelParams>,
    lambda2: f64,
    reward_refs: Option<&BTreeMap<usize, Vec<Caption>>>,
    epochs: usize,
    base_lr: f64,
) -> Result<(ModelParams, TrainReport), HarnessError> {
    let start = Instant::now();

    // One corpus-level table from the training reward references, fixed for
    // the whole stage; sample, baseline and teacher captions all score
    // against it.
    let reward_sets: Vec<Vec<Caption>> = ctx
        .train_idx
        .iter()
        .map(|&i| reward_refs_for(ctx, reward_refs, i).to_vec())
        .collect();
    let idf = IdfTable::build(&reward_sets)?;

    // With the cache flag on, the frozen teacher's captions are computed
    // once instead of once per batch.
    let teacher_cache: Option<BTreeMap<usize, Caption>> = match critic_teacher {
        Some(teacher) if cfg.cache_teacher_captions => Some(
            ctx.train_idx
                .par_iter()
                .map(|&ri| -> Result<(usize, Caption), HarnessError> {
                    Ok((ri, greedy_decode_input(&ctx.inputs[ri], teacher, cfg.max_len)?))
                })
                .collect::<Result<_, _>>()?,
        ),
        _ => None,
    };

    let mut rows = Vec::with_capacity(epochs);
    let mut step_losses = Vec::new();
    for epoch in 0..epochs {
        let lr = cfg.lr_at(base_lr, epoch, epochs);
        let stats = rl_epoch(
            cfg,
            ctx,
            &mut params,
            critic_teacher,
            teacher_cache.as_ref(),
            lambda2,
            reward_refs,
            &idf,
            epoch,
            lr,
        )?;
        step_losses.extend_from_slice(&stats.step_losses);
        let (_, val) = evaluate(&params, ctx, &ctx.val_idx)?;
        rows.push(EpochRow {
            epoch: epoch + 1,
            train_metric: stats.item_mean,
            val,
        });
    }

    let (_, test) = evaluate(&params, ctx, &ctx.test_idx)?;
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        rows,
        test,
        wall_time_s: start.elapsed().as_secs_f64(),
        config_hash: cfg.hash(),
        step_losses,
    };
    Ok((params, report))
}

fn reward_refs_for<'a>(
    ctx: &'a DataContext,
    reward_refs: Option<&'a BTreeMap<usize, Vec<Caption>>>,
    ri: usize,
) -> &'a [Caption] {
    reward_refs
        .and_then(|m| m.get(&ri))
        .map(Vec::as_slice)
        .unwrap_or(&ctx.refs[ri])
}

#[allow(clippy::too_many_arguments)]
fn rl_epoch(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    params: &mut ModelParams,
    critic_teacher: Option<&ModelParams>,
    teacher_cache: Option<&BTreeMap<usize, Caption>>,
    lambda2: f64,
    reward_refs: Option<&BTreeMap<usize, Vec<Caption>>>,
    idf: &IdfTable,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats, HarnessError> {
    use rand::seq::SliceRandom;
    let mut order = ctx.train_idx.clone();
    order.shuffle(&mut derived_rng(cfg.seed, "rl-shuffle", epoch as u64));

    let mut step_losses = Vec::new();
    let mut reward_sum = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &*params;
        let results: Vec<(f64, f64, GradMap)> = batch
            .par_iter()
            .map(|&ri| {
                rl_item(
                    cfg,
                    ctx,
                    snapshot,
                    critic_teacher,
                    teacher_cache,
                    lambda2,
                    reward_refs,
                    idf,
                    epoch,
                    ri,
                )
            })
            .collect::<Result<_, _>>()?;

        let mut grads: Option<GradMap> = None;
        for (_, reward, g) in &results {
            reward_sum += reward;
            accumulate_grads(&mut grads, g);
        }
        let mut grads = grads.expect("non-empty batch");
        scale_grads(&mut grads, 1.0 / results.len() as f64);
        clip_grads(&mut grads, GRAD_CLIP_NORM);
        params.apply_grads(&grads, lr);
        step_losses.push(results.iter().map(|(l, _, _)| l).sum::<f64>() / results.len() as f64);
    }
    Ok(EpochStats {
        item_mean: reward_sum / ctx.train_idx.len() as f64,
        step_losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn rl_item(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
    params: &ModelParams,
    critic_teacher: Option<&ModelParams>,
    teacher_cache: Option<&BTreeMap<usize, Caption>>,
    lambda2: f64,
    reward_refs: Option<&BTreeMap<usize, Vec<Caption>>>,
    idf: &IdfTable,
    epoch: usize,
    ri: usize,
) -> Result<(f64, f64, GradMap), HarnessError> {
    let record = &ctx.records[ri];
    let input = &ctx.inputs[ri];
    let refs = reward_refs_for(ctx, reward_refs, ri);

    let mut rng = derived_rng(cfg.seed, "rl-sample", stream(epoch, record.id));
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let scene = encode_record(&mut tape, &nodes, input)?;
    let rollout = sample_rollout(&mut tape, &nodes, &scene, cfg.max_len, &mut rng)?;

    let greedy = greedy_decode_input(input, params, cfg.max_len)?;
    let cider_sample = cider(&rollout.caption, refs, idf)?;
    let cider_greedy = cider(&greedy, refs, idf)?;
    let scst = scst_reward(cider_sample, cider_greedy);

    let rewards = match critic_teacher {
        None => RewardVector::constant(scst, rollout.log_probs.len()),
        Some(teacher) => {
            let teacher_caption = match teacher_cache.and_then(|c| c.get(&ri)) {
                Some(cached) => cached.clone(),
                None => greedy_decode_input(input, teacher, cfg.max_len)?,
            };
            let cider_teacher = cider(&teacher_caption, refs, idf)?;
            let partition = lcs_partition(&rollout.caption, &teacher_caption);
            match tcts_adjustment_for(&partition, rollout.emitted_eos, cider_teacher) {
                Ok(adj) => {
                    tcts_reward_vector(&partition, rollout.emitted_eos, scst, &adj, lambda2)
                }
                // A sample with no rewardable positions falls back to the
                // plain self-critical reward.
                Err(RlError::DegenerateCaption) => {
                    RewardVector::constant(scst, rollout.log_probs.len())
                }
                Err(e) => return Err(e.into()),
            }
        }
    };

    // The adjustment is zero-sum, so the vector mean must reproduce the
    // self-critical scalar; anything else is a reward-shaping bug.
    if (rewards.mean() - scst).abs() > 1e-9 {
        return Err(HarnessError::Numeric(format!(
            "reward vector mean {} deviates from SCST reward {} on record {}",
            rewards.mean(),
            scst,
            record.id
        )));
    }

    let loss_node = build_pg_loss(&mut tape, &rollout.log_probs, &rewards)?;
    let grads = tape.backward(loss_node)?;
    Ok((tape.value(loss_node).item(), scst, grads))
}

/// A finished training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Runs one experiment end to end: load data, dispatch on mode, train,
/// and write the requested artifacts.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let ctx = DataContext::load(&cfg.data_path, cfg.min_count, cfg.max_len)?;
    let outcome = run_train_with(cfg, &ctx)?;
    if let Some(path) = &cfg.checkpoint_out {
        checkpoint::save(
            &outcome.params,
            cfg.min_count,
            &ctx.vocab_hash,
            &cfg.hash(),
            path,
        )?;
    }
    if let Some(path) = &cfg.report_path {
        outcome.report.write(path)?;
    }
    Ok(outcome)
}

/// [`run_train`] over an already-loaded context; artifacts are not written.
pub fn run_train_with(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let model_cfg = |uses_attributes: bool| ModelConfig {
        hidden_dim: cfg.hidden_dim,
        vocab_size: ctx.vocab.size(),
        max_len: cfg.max_len,
        uses_attributes,
    };

    let (params, report) = match cfg.mode {
        Mode::Teacher => {
            let init = ModelParams::init(
                model_cfg(true),
                &mut derived_rng(cfg.seed, "init-teacher", 0),
            );
            let (params, report) =
                train_xe(cfg, ctx, init, None, 0.0, cfg.epochs, cfg.effective_lr())?;
            if cfg.teacher_rl_epochs > 0 {
                let (params, rl_report) = train_rl(
                    cfg,
                    ctx,
                    params,
                    None,
                    0.0,
                    None,
                    cfg.teacher_rl_epochs,
                    DEFAULT_RL_LR,
                )?;
                (params, merge_reports(report, rl_report))
            } else {
                (params, report)
            }
        }
        Mode::Xe => {
            let init = ModelParams::init(
                model_cfg(false),
                &mut derived_rng(cfg.seed, "init-student", 0),
            );
            train_xe(cfg, ctx, init, None, 0.0, cfg.epochs, cfg.effective_lr())?
        }
        Mode::TctsXe => {
            let teacher = load_teacher(cfg, ctx)?;
            let init = ModelParams::init(
                model_cfg(false),
                &mut derived_rng(cfg.seed, "init-student", 0),
            );
            train_xe(
                cfg,
                ctx,
                init,
                Some(&teacher),
                cfg.lambda1,
                cfg.epochs,
                cfg.effective_lr(),
            )?
        }
        Mode::Scst => {
            let student = load_student(cfg, ctx)?;
            train_rl(cfg, ctx, student, None, 0.0, None, cfg.epochs, cfg.effective_lr())?
        }
        Mode::TctsRl => {
            let teacher = load_teacher(cfg, ctx)?;
            let student = load_student(cfg, ctx)?;
            train_rl(
                cfg,
                ctx,
                student,
                Some(&teacher),
                cfg.lambda2,
                None,
                cfg.epochs,
                cfg.effective_lr(),
            )?
        }
    };
    Ok(TrainOutcome { params, report })
}

fn merge_reports(mut xe: TrainReport, rl: TrainReport) -> TrainReport {
    let offset = xe.rows.len();
    xe.rows.extend(rl.rows.into_iter().map(|mut row| {
        row.epoch += offset;
        row
    }));
    xe.test = rl.test;
    xe.wall_time_s += rl.wall_time_s;
    xe.step_losses.extend(rl.step_losses);
    xe
}

fn load_teacher(cfg: &ExperimentConfig, ctx: &DataContext) -> Result<ModelParams, HarnessError> {
    let path = cfg
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing teacher_checkpoint".into()))?;
    let (params, header) = checkpoint::load(path)?;
    if header.vocab_hash != ctx.vocab_hash {
        return Err(HarnessError::IncompatibleCheckpoint(
            "teacher checkpoint vocabulary hash does not match the dataset".into(),
        ));
    }
    if !params.cfg.uses_attributes {
        return Err(HarnessError::IncompatibleCheckpoint(
            "teacher checkpoint does not carry attribute weights".into(),
        ));
    }
    if params.cfg.vocab_size != ctx.vocab.size() {
        return Err(HarnessError::IncompatibleCheckpoint(
            "teacher checkpoint vocabulary size mismatch".into(),
        ));
    }
    Ok(params)
}

fn load_student(cfg: &ExperimentConfig, ctx: &DataContext) -> Result<ModelParams, HarnessError> {
    let path = cfg
        .checkpoint_in
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing checkpoint_in".into()))?;
    let (params, header) = checkpoint::load(path)?;
    if header.vocab_hash != ctx.vocab_hash {
        return Err(HarnessError::IncompatibleCheckpoint(
            "checkpoint vocabulary hash does not match the dataset".into(),
        ));
    }
    if params.cfg.hidden_dim != cfg.hidden_dim
        || params.cfg.max_len != cfg.max_len
        || params.cfg.vocab_size != ctx.vocab.size()
    {
        return Err(HarnessError::IncompatibleCheckpoint(format!(
            "checkpoint dimensions (d={}, max_len={}, K={}) do not match the config",
            params.cfg.hidden_dim, params.cfg.max_len, params.cfg.vocab_size
        )));
    }
    Ok(params)
}

/// Evaluates a checkpoint on one split of a data file, returning
/// per-record rows and the mean.
pub fn run_eval(
    ckpt_path: &Path,
    data_path: &Path,
    split: Split,
) -> Result<(Vec<(u64, MetricReport)>, MetricReport), HarnessError> {
    let (params, header) = checkpoint::load(ckpt_path)?;
    let ctx = DataContext::load(data_path, header.min_count, header.max_len)?;
    if header.vocab_hash != ctx.vocab_hash {
        return Err(HarnessError::IncompatibleCheckpoint(
            "checkpoint vocabulary hash does not match the dataset".into(),
        ));
    }
    let idxs = ctx.split_idx(split).to_vec();
    if idxs.is_empty() {
        return Err(HarnessError::DataContract(format!(
            "no records in the requested split of {}",
            data_path.display()
        )));
    }
    evaluate(&params, &ctx, &idxs)
}

/// Two SCST runs from the same student checkpoint and seed: one rewarding
/// against the teacher's caption as the sole reference, one against a
/// single randomly chosen ground-truth reference.
pub fn run_teacher_as_gt_ablation(
    cfg: &ExperimentConfig,
) -> Result<(TrainReport, TrainReport), HarnessError> {
    let ctx = DataContext::load(&cfg.data_path, cfg.min_count, cfg.max_len)?;
    run_teacher_as_gt_ablation_with(cfg, &ctx)
}

pub fn run_teacher_as_gt_ablation_with(
    cfg: &ExperimentConfig,
    ctx: &DataContext,
) -> Result<(TrainReport, TrainReport), HarnessError> {
    if cfg.teacher_checkpoint.is_none() || cfg.checkpoint_in.is_none() {
        return Err(HarnessError::Config(
            "ablation requires teacher_checkpoint and checkpoint_in".into(),
        ));
    }
    let teacher = load_teacher(cfg, ctx)?;
    let student = load_student(cfg, ctx)?;

    let teacher_refs: BTreeMap<usize, Vec<Caption>> = ctx
        .train_idx
        .par_iter()
        .map(|&ri| -> Result<(usize, Vec<Caption>), HarnessError> {
            let caption = greedy_decode_input(&ctx.inputs[ri], &teacher, cfg.max_len)?;
            Ok((ri, vec![caption]))
        })
        .collect::<Result<_, _>>()?;

    let single_gt_refs: BTreeMap<usize, Vec<Caption>> = ctx
        .train_idx
        .iter()
        .map(|&ri| {
            let mut rng = derived_rng(cfg.seed, "ablate-ref", ctx.records[ri].id);
            let pick = rng.gen_range(0..ctx.refs[ri].len());
            (ri, vec![ctx.refs[ri][pick].clone()])
        })
        .collect();

    let lr = cfg.effective_lr();
    let (_, teacher_gt_report) = train_rl(
        cfg,
        ctx,
        student.clone(),
        None,
        0.0,
        Some(&teacher_refs),
        cfg.epochs,
        lr,
    )?;
    let (_, single_gt_report) = train_rl(
        cfg,
        ctx,
        student,
        None,
        0.0,
        Some(&single_gt_refs),
        cfg.epochs,
        lr,
    )?;

    if let Some(path) = &cfg.report_path {
        std::fs::write(path, paired_csv(&teacher_gt_report, &single_gt_report))?;
    }
    Ok((teacher_gt_report, single_gt_report))
}

/// Paired epoch table for the two ablation arms.
pub fn paired_csv(a: &TrainReport, b: &TrainReport) -> String {
    let mut out = String::from(
        "row,teacher_gt_reward,teacher_gt_bleu4,teacher_gt_rougeL,teacher_gt_cider,\
         one_gt_reward,one_gt_bleu4,one_gt_rougeL,one_gt_cider\n",
    );
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            ra.epoch,
            ra.train_metric,
            ra.val.bleu[3],
            ra.val.rouge_l,
            ra.val.cider,
            rb.train_metric,
            rb.val.bleu[3],
            rb.val.rouge_l,
            rb.val.cider,
        ));
    }
    out.push_str(&format!(
        "test,,{},{},{},,{},{},{}\n",
        a.test.bleu[3], a.test.rouge_l, a.test.cider, b.test.bleu[3], b.test.rouge_l, b.test.cider,
    ));
    out
}
