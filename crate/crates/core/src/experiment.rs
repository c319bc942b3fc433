//! Evaluation cells and ablation variants built on top of training.

use serde::Serialize;

use crate::config::{Ablation, Cell, ExperimentConfig, LossConfig, Switch};
use crate::datasim::{generate, Corpus, CorpusSpec, DataError, Split};
use crate::metrics::{classification_metrics, macro_auroc, ClassificationMetrics, MetricsError};
use crate::model::DualModel;
use crate::training::{evaluate, recovery_mse, train, Evaluation, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Corpus spec for one cell: same signals and splits, cell-specific
/// corruption rates.
pub fn cell_spec(base: &CorpusSpec, cell: &Cell) -> CorpusSpec {
    let mut spec = base.clone();
    spec.noise_rate = cell.noise_rate;
    spec.missing_rate = cell.missing_rate;
    spec.missing_modalities = vec![cell.missing_modality];
    spec
}

pub fn cell_corpus(base: &CorpusSpec, cell: &Cell) -> Result<Corpus> {
    Ok(generate(&cell_spec(base, cell))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub cell: Cell,
    pub samples: usize,
    pub metrics: ClassificationMetrics,
    pub auroc: f64,
    /// Per-feature reconstruction error of the missing modality on complete
    /// test samples, when reconstruction is enabled.
    pub recovery_mse: Option<f64>,
}

/// Evaluates `model` on the test split of the cell's corpus.
pub fn evaluate_cell(model: &DualModel, loss: &LossConfig, base: &CorpusSpec, cell: &Cell) -> Result<(CellResult, Evaluation)> {
    let corpus = cell_corpus(base, cell)?;
    evaluate_corpus(model, loss, &corpus, cell.missing_modality)
}

/// Evaluates `model` on the test split of `corpus`, scoring reconstruction of
/// `missing_modality`.
pub fn evaluate_corpus(model: &DualModel, loss: &LossConfig, corpus: &Corpus, missing_modality: usize) -> Result<(CellResult, Evaluation)> {
    let cell = Cell { noise_rate: corpus.spec.noise_rate, missing_rate: corpus.spec.missing_rate, missing_modality };
    let cache = model.feature_cache(corpus, 128).map_err(TrainError::from)?;
    let ids = corpus.ids(Split::Test);
    let eval = evaluate(model, corpus, &ids, &cache, loss)?;
    let metrics = classification_metrics(&eval.predictions, &eval.labels, model.classes)?;
    let auroc = macro_auroc(&eval.probs, &eval.labels, model.classes)?;
    let recovery_mse = if model.ablation.reconstruction_off {
        None
    } else {
        // Score on the clean counterpart so every test sample is complete.
        let clean = cell_corpus(&corpus.spec, &Cell { missing_rate: 0.0, ..cell })?;
        let clean_cache = model.feature_cache(&clean, 128).map_err(TrainError::from)?;
        Some(recovery_mse(model, &clean, &ids, &clean_cache, missing_modality)?)
    };
    Ok((CellResult { cell, samples: ids.len(), metrics, auroc, recovery_mse }, eval))
}

/// Trains on the cell's corpus and evaluates on its test split.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<(TrainOutcome, CellResult)> {
    let corpus = cell_corpus(&cfg.corpus, cell)?;
    let outcome = train(cfg, &corpus)?;
    let (result, _) = evaluate_corpus(&outcome.model, &cfg.loss, &corpus, cell.missing_modality)?;
    Ok((outcome, result))
}

/// A named ablation setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: &'static str,
    pub ablation: Ablation,
}

fn with(switches: &[Switch]) -> Ablation {
    let mut a = Ablation::default();
    switches.iter().for_each(|&s| a.set(s));
    a
}

/// The uncertainty ladder, from the full method down to static weights,
/// followed by the reconstruction variant.
///
/// Each uncertainty step removes one more component: calibration, then the
/// fluctuation term, then all dynamic weighting.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant { name: "full", ablation: Ablation::default() },
        Variant { name: "no-calibration", ablation: with(&[Switch::CalibrationOff]) },
        Variant { name: "no-fluctuation", ablation: with(&[Switch::CalibrationOff, Switch::FluctuationOff]) },
        Variant { name: "static-weights", ablation: with(&[Switch::StaticWeights]) },
        Variant { name: "normalization-off", ablation: with(&[Switch::NormalizationOff]) },
    ]
}

/// `cfg` with `ablation` applied and the seed replaced.
pub fn variant_config(cfg: &ExperimentConfig, ablation: &Ablation, seed: u64) -> ExperimentConfig {
    let mut out = cfg.clone();
    out.ablation = ablation.clone();
    out.seed = seed;
    out
}
