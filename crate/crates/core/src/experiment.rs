//! One training run end to end: resolve the config against a dataset,
//! standardize on the train split, train, and score the test split.

use serde::{Deserialize, Serialize};

use crate::autodiff::RealArray;
use crate::config::RunConfig;
use crate::data::{split, Dataset, Scaler, SplitSpec, Splits};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::train::{evaluate, train, Metrics, Task, TrainReport};

#[derive(Clone, Debug)]
pub struct Prepared {
    /// Config with every `auto` key filled in.
    pub run: RunConfig,
    pub dataset: String,
    pub model_config: ModelConfig,
    /// Standardized `(T, D)` values.
    pub values: RealArray,
    pub origin_index: u64,
    pub splits: Splits,
    pub scaler: Scaler,
}

pub fn prepare(cfg: &RunConfig, ds: &Dataset) -> Result<Prepared> {
    let run = cfg.resolve(ds);
    let model_config = run.model_config(ds.channels())?;
    let splits = split(
        ds.len(),
        SplitSpec::for_dataset(&ds.name),
        model_config.input_len(),
        model_config.horizon,
    )?;
    let scaler = Scaler::fit(&ds.values, splits.train.clone())?;
    Ok(Prepared {
        values: scaler.transform(&ds.values)?,
        run,
        dataset: ds.name.clone(),
        model_config,
        origin_index: ds.origin_index,
        splits,
        scaler,
    })
}

impl Prepared {
    pub fn task(&self) -> Task<'_> {
        Task {
            values: &self.values,
            origin_index: self.origin_index,
            splits: self.splits.clone(),
            input_len: self.model_config.input_len(),
            horizon: self.model_config.horizon,
        }
    }

    pub fn fresh_model(&self) -> Result<Model> {
        Model::new(self.model_config.clone(), self.run.seed)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub test: Metrics,
}

/// Trains a fresh model and scores its best-validation parameters on the test split.
pub fn run(p: &Prepared) -> Result<RunOutcome> {
    let mut model = p.fresh_model()?;
    let task = p.task();
    let report = train(&mut model, &task, &p.run.train_config()?)?;
    let test = evaluate(&model, &task, task.splits.test.clone())?;
    Ok(RunOutcome { model, report, test })
}

/// Contents of the metrics JSON written by `train` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub lookback: usize,
    pub horizon: usize,
    pub variant: String,
    pub multiscale: bool,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub inst_norm: bool,
}

impl RunSummary {
    pub fn new(p: &Prepared, test: Metrics, best_epoch: usize) -> Self {
        Self {
            dataset: p.dataset.clone(),
            lookback: p.run.lookback,
            horizon: p.run.horizon,
            variant: p.run.variant.to_string(),
            multiscale: p.run.multiscale,
            seed: p.run.seed,
            mse: test.mse,
            mae: test.mae,
            epochs: p.run.epochs,
            best_epoch,
            inst_norm: p.run.inst_norm,
        }
    }
}
