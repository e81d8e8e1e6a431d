//! Ablation harness: trains one model per component switch pattern and
//! collects their evaluation reports into a single document.
//!
//! The grid covers the full model, dropping the cause objective, every
//! one- and two-modality prompt subset, and removing the context graph,
//! its level structure, or its locality window. All rows share the base
//! configuration (and seed), differing only in switches, so the results
//! are directly comparable.

use serde::Serialize;

use crate::config::Config;
use crate::corpus::{Corpus, Split};
use crate::error::Result;
use crate::metrics::{MetricReport, PairMode};
use crate::objective::{evaluate_model, fit};

/// Switch patterns by row name, in report order.
const ROWS: [(&str, fn(&mut Config)); 11] = [
    ("full", |_| {}),
    ("no_mecpe", |c| c.ablation.use_mecpe = false),
    ("text_only", |c| {
        c.ablation.use_audio = false;
        c.ablation.use_vision = false;
    }),
    ("audio_only", |c| {
        c.ablation.use_text = false;
        c.ablation.use_vision = false;
    }),
    ("vision_only", |c| {
        c.ablation.use_text = false;
        c.ablation.use_audio = false;
    }),
    ("text_audio", |c| c.ablation.use_vision = false),
    ("text_vision", |c| c.ablation.use_audio = false),
    ("audio_vision", |c| c.ablation.use_text = false),
    ("no_thc", |c| c.ablation.use_thc = false),
    ("no_hierarchy", |c| c.ablation.use_hierarchy = false),
    ("no_window", |c| c.ablation.use_window = false),
];

/// All configurations to run, derived from a base configuration.
pub fn grid(base: &Config) -> Vec<(String, Config)> {
    ROWS.iter()
        .map(|(name, tweak)| {
            let mut cfg = base.clone();
            tweak(&mut cfg);
            (name.to_string(), cfg)
        })
        .collect()
}

#[derive(Serialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub report: MetricReport,
}

#[derive(Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Train and evaluate every grid row. Evaluation uses the test split
/// when the corpus has one, otherwise the training split.
pub fn run(base: &Config, corpus: &Corpus) -> Result<AblationReport> {
    let test = corpus.by_split(Split::Test);
    let mut rows = Vec::with_capacity(ROWS.len());
    for (name, cfg) in grid(base) {
        let outcome = fit(&cfg, corpus)?;
        let eval_set = if test.is_empty() {
            corpus.by_split(Split::Train)
        } else {
            test.clone()
        };
        let report = evaluate_model(&outcome.model, &eval_set, PairMode::Strict);
        rows.push(AblationRow {
            name,
            seed: cfg.train.seed,
            report,
        });
    }
    Ok(AblationReport { rows })
}
