//! Command-line surface: dataset generation, training, evaluation, caption
//! scoring, and the teacher-as-ground-truth ablation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tcts::data::{gen_dataset, measure_misalignment, split_records, write_jsonl, GenConfig, Split};
use tcts::harness::{
    run_eval, run_teacher_as_gt_ablation, run_train, scores_csv, ExperimentConfig, HarnessError,
};
use tcts::metrics::{IdfTable, MetricReport};
use tcts::text::{tokenize, Vocab};

#[derive(Parser)]
#[command(name = "tcts", version, about = "Teacher-critical caption training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene-captioning dataset (JSONL).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train in the mode given by the config (teacher, xe, tcts-xe, scst,
    /// tcts-rl).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Greedy-decode a checkpoint over one split and score it.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score candidate sentences against reference sets.
    Score {
        /// One candidate sentence per line.
        #[arg(long)]
        cand: PathBuf,
        /// JSONL, one {"id": .., "refs": [..]} object per line, aligned
        /// with the candidate lines.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Paired SCST runs rewarding against the teacher caption vs one
    /// ground-truth caption.
    AblateTeacherGt {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (use train|val|test)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Gen { config, out } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", config.display())))?;
            let gen_cfg: GenConfig = serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", config.display())))?;
            let records = gen_dataset(&gen_cfg);
            write_jsonl(&records, &out)?;
            let train: Vec<_> = split_records(&records, Split::Train)
                .into_iter()
                .cloned()
                .collect();
            println!(
                "wrote {} records ({} train / {} val / {} test) to {}",
                records.len(),
                train.len(),
                split_records(&records, Split::Val).len(),
                split_records(&records, Split::Test).len(),
                out.display()
            );
            println!(
                "train-split misalignment fraction: {:.4}",
                measure_misalignment(&train)
            );
            Ok(())
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let outcome = run_train(&cfg)?;
            println!("mode: {}", cfg.mode);
            println!("config hash: {}", cfg.hash());
            println!("report hash: {}", outcome.report.hash());
            if let Some(last) = outcome.report.rows.last() {
                println!(
                    "final epoch {}: train_metric={:.6} val CIDEr={:.4}",
                    last.epoch, last.train_metric, last.val.cider
                );
            }
            let t = outcome.report.test;
            println!(
                "test: B1={:.4} B2={:.4} B3={:.4} B4={:.4} RL={:.4} C={:.4}",
                t.bleu[0], t.bleu[1], t.bleu[2], t.bleu[3], t.rouge_l, t.cider
            );
            Ok(())
        }
        Command::Eval { ckpt, data, split, report } => {
            let (rows, mean) = run_eval(&ckpt, &data, split)?;
            let str_rows: Vec<(String, MetricReport)> =
                rows.into_iter().map(|(id, m)| (id.to_string(), m)).collect();
            std::fs::write(&report, scores_csv(&str_rows, Some(&mean)))?;
            println!(
                "evaluated {} records: B4={:.4} RL={:.4} C={:.4} -> {}",
                str_rows.len(),
                mean.bleu[3],
                mean.rouge_l,
                mean.cider,
                report.display()
            );
            Ok(())
        }
        Command::Score { cand, refs, report } => {
            let csv = score_files(&cand, &refs)?;
            std::fs::write(&report, csv)?;
            println!("wrote {}", report.display());
            Ok(())
        }
        Command::AblateTeacherGt { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (teacher_gt, one_gt) = run_teacher_as_gt_ablation(&cfg)?;
            println!(
                "teacher-caption rewards: test B4={:.4} RL={:.4} C={:.4}",
                teacher_gt.test.bleu[3],
                teacher_gt.test.rouge_l,
                teacher_gt.test.cider
            );
            println!(
                "one-gt-caption rewards:  test B4={:.4} RL={:.4} C={:.4}",
                one_gt.test.bleu[3],
                one_gt.test.rouge_l,
                one_gt.test.cider
            );
            if let Some(path) = &cfg.report_path {
                println!("paired table -> {}", path.display());
            }
            Ok(())
        }
    }
}

/// Reference-set line of the `score` refs file.
#[derive(serde::Deserialize)]
struct RefLine {
    id: serde_json::Value,
    refs: Vec<String>,
}

fn score_files(cand_path: &std::path::Path, refs_path: &std::path::Path) -> Result<String, HarnessError> {
    let cand_text = std::fs::read_to_string(cand_path)?;
    let refs_text = std::fs::read_to_string(refs_path)?;
    let candidates: Vec<&str> = cand_text.lines().filter(|l| !l.trim().is_empty()).collect();
    let ref_lines: Vec<RefLine> = refs_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                HarnessError::DataContract(format!("refs line {}: {e}", i + 1))
            })
        })
        .collect::<Result<_, _>>()?;
    if candidates.len() != ref_lines.len() {
        return Err(HarnessError::DataContract(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            ref_lines.len()
        )));
    }
    if ref_lines.iter().any(|l| l.refs.is_empty()) {
        return Err(HarnessError::DataContract("empty reference set".into()));
    }

    // Vocabulary over the reference corpus only (min-count 1): candidate
    // OOV tokens map to UNK, which never matches a reference token.
    let ref_tokens: Vec<Vec<String>> = ref_lines
        .iter()
        .flat_map(|l| l.refs.iter())
        .map(|r| tokenize(r).map_err(|e| HarnessError::DataContract(e.to_string())))
        .collect::<Result<_, _>>()?;
    let vocab = Vocab::build(&ref_tokens, 1);
    let max_len = ref_tokens.iter().map(Vec::len).max().unwrap_or(1).max(
        candidates
            .iter()
            .filter_map(|c| tokenize(c).ok().map(|t| t.len()))
            .max()
            .unwrap_or(1),
    );

    let encoded_refs: Vec<Vec<tcts::text::Caption>> = ref_lines
        .iter()
        .map(|l| {
            l.refs
                .iter()
                .map(|r| {
                    tokenize(r)
                        .map(|toks| vocab.encode(&toks, max_len).0)
                        .map_err(|e| HarnessError::DataContract(e.to_string()))
                })
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;
    let idf = IdfTable::build(&encoded_refs)?;

    let mut rows = Vec::with_capacity(candidates.len());
    for ((cand, line), refs) in candidates.iter().zip(&ref_lines).zip(&encoded_refs) {
        let toks = tokenize(cand).map_err(|e| HarnessError::DataContract(e.to_string()))?;
        let (caption, _) = vocab.encode(&toks, max_len);
        let m = MetricReport::score(&caption, refs, &idf)?;
        rows.push((line.id.to_string(), m));
    }
    Ok(scores_csv(&rows, None))
}
