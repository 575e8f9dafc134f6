//! Shared fixtures for the integration suites.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use tcts::data::{gen_dataset, write_jsonl, GenConfig};
use tcts::harness::{DataContext, ExperimentConfig, Mode};

/// The default synthetic dataset, generated once per test binary.
pub fn default_data() -> &'static DataContext {
    static DATA: OnceLock<DataContext> = OnceLock::new();
    DATA.get_or_init(|| {
        let records = gen_dataset(&GenConfig::default());
        DataContext::from_records(records, 5, 16).expect("default dataset loads")
    })
}

/// Scratch directory shared by one test binary; lives until process exit.
pub fn scratch_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("tcts-tests-{}", std::process::id()));
        std::fs::create_dir_all(&dir).expect("create scratch dir");
        dir
    })
}

/// The default dataset written to disk once, for file-driven runs.
pub fn default_data_file() -> &'static Path {
    static FILE: OnceLock<PathBuf> = OnceLock::new();
    FILE.get_or_init(|| {
        let path = scratch_dir().join("default-data.jsonl");
        let records = gen_dataset(&GenConfig::default());
        write_jsonl(&records, &path).expect("write default dataset");
        path
    })
}

/// A reduced dataset for fast determinism/smoke checks.
pub fn small_data(num_records: usize) -> DataContext {
    let records = gen_dataset(&GenConfig {
        num_records,
        ..GenConfig::default()
    });
    DataContext::from_records(records, 5, 16).expect("small dataset loads")
}

/// An in-memory config mirroring the serde defaults; the data path is a
/// placeholder because the context is passed in explicitly.
pub fn config(mode: Mode, seed: u64, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        mode,
        lambda1: 0.2,
        lambda2: 0.02,
        epochs,
        batch_size: 32,
        learning_rate: None,
        lr_decay_factor: 0.5,
        lr_decay_every: None,
        seed,
        hidden_dim: 64,
        max_len: 16,
        min_count: 5,
        teacher_rl_epochs: 0,
        cache_teacher_captions: false,
        data_path: PathBuf::from("in-memory"),
        checkpoint_in: None,
        checkpoint_out: None,
        teacher_checkpoint: None,
        report_path: None,
    }
}
