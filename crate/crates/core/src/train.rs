//! Two-phase training loop with a JSON-lines step log and best-validation
//! checkpointing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::datagen::SamplePair;
use crate::gen_net::NetError;
use crate::geometry::chamfer_distance;
use crate::losses::LossReport;
use crate::model::CompletionModel;
use crate::nn::{apply_bn_updates, BnUpdate, Ctx};
use crate::seed::{stream_rng, streams};
use crate::tensor::{Adam, AdamConfig, ParamGrads, Tape, TensorError};

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("validation split is empty")]
    EmptyValSplit,
    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint kept")]
    NonFinite { epoch: usize, step: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// One optimizer step: batch-mean loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean CD(P_o, ground truth) over the validation split.
    pub val_cd: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: CompletionModel,
    pub optimizer: Adam,
    /// Best-validation parameters.
    pub best: CompletionModel,
    pub best_epoch: usize,
    /// Epoch 0 is the untrained model.
    pub history: Vec<EpochSummary>,
    pub log: Vec<LogRow>,
}

/// Knobs beyond the run config.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the log and checkpoints; nothing is written if unset.
    pub run_dir: Option<PathBuf>,
    /// Keep encoder and decoder parameters fixed.
    pub freeze_generation: bool,
    /// Start from these parameters instead of a fresh initialization.
    pub init: Option<CompletionModel>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// Mean CD(P_o, complete) in eval mode.
pub fn validation_cd(model: &CompletionModel, samples: &[SamplePair]) -> Result<f64, NetError> {
    let cds = samples
        .par_iter()
        .map(|s| {
            let (p_o, _, _) = model.complete(&s.partial)?;
            Ok(chamfer_distance(&p_o, &s.complete))
        })
        .collect::<Result<Vec<f64>, NetError>>()?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

struct SampleStep {
    grads: ParamGrads,
    report: LossReport,
    bn: Vec<BnUpdate>,
}

fn sample_step(model: &CompletionModel, sample: &SamplePair, config: &RunConfig, lambda: f64) -> Result<SampleStep, TrainError> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, true);
    let pass = model.forward(&ctx, &sample.partial)?;
    let (loss, report) = model.loss(&pass, &sample.complete, &config.train.loss, lambda)?;
    let grads = tape.backward(loss)?.param_grads(&model.store);
    Ok(SampleStep {
        grads,
        report,
        bn: ctx.take_bn_updates(),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains with `λ = 0` for epochs `1..=phase_switch` and `λ = loss.lambda`
/// afterwards. Each step averages per-sample gradients over the batch (in
/// a fixed order, so results do not depend on thread count) and folds the
/// per-sample batch-norm statistics into the running buffers.
pub fn train(
    config: &RunConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyValSplit);
    }
    let tc = &config.train;
    let mut model = match &options.init {
        Some(m) => m.clone(),
        None => CompletionModel::new(config.model.clone(), config.seed)?,
    };
    let adam_config = AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    };
    let mut optimizer = Adam::new(adam_config, &model.store);
    let frozen: Vec<_> = model
        .store
        .ids()
        .filter(|&id| {
            let name = model.store.name(id);
            options.freeze_generation && (name.starts_with("encoder.") || name.starts_with("decoder."))
        })
        .collect();

    let mut log_file = match &options.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };
    let save = |model: &CompletionModel, optimizer: &Adam, epoch: usize, name: &str| -> Result<(), TrainError> {
        if let Some(dir) = &options.run_dir {
            let ck = Checkpoint {
                config: config.clone(),
                epoch: epoch as u64,
                model: model.clone(),
                optimizer: optimizer.clone(),
            };
            ck.save(&dir.join(name))?;
        }
        Ok(())
    };

    let initial = validation_cd(&model, val_set)?;
    let mut history = vec![EpochSummary {
        epoch: 0,
        val_cd: initial,
    }];
    let mut best = model.clone();
    let (mut best_epoch, mut best_val) = (0, initial);
    save(&model, &optimizer, 0, BEST_CHECKPOINT)?;
    save(&model, &optimizer, 0, LAST_CHECKPOINT)?;
    if options.verbose {
        eprintln!("epoch 0: val_cd {initial:.6e}");
    }

    let mut log = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=tc.epochs {
        let lambda = tc.lambda_at(epoch);
        order.shuffle(&mut stream_rng(config.seed, streams::SHUFFLE, epoch as u64));
        for batch in order.chunks(tc.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| sample_step(&model, &train_set[i], config, lambda))
                .collect::<Vec<_>>();
            let mut steps = Vec::with_capacity(results.len());
            for r in results {
                match r {
                    Ok(s) => steps.push(s),
                    Err(TrainError::Net(NetError::Geometry(_))) => {
                        return Err(TrainError::NonFinite { epoch, step });
                    }
                    Err(e) => return Err(e),
                }
            }
            let mut grads = ParamGrads::new(model.store.len());
            for s in &steps {
                grads.merge(&s.grads);
            }
            grads.scale(1.0 / steps.len() as f64);
            for &id in &frozen {
                grads.clear(id);
            }
            let reports: Vec<LossReport> = steps.iter().map(|s| s.report).collect();
            let report = LossReport::mean(&reports);
            if !report.total.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            optimizer.step(&mut model.store, &grads)?;
            let bn: Vec<Vec<BnUpdate>> = steps.into_iter().map(|s| s.bn).collect();
            apply_bn_updates(&mut model.store, &bn, tc.bn_momentum);
            let row = LogRow {
                epoch,
                step,
                lambda,
                report,
            };
            if let Some((w, path)) = &mut log_file {
                let line = serde_json::to_string(&row).expect("log row serializes");
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
            log.push(row);
        }
        if let Some((w, path)) = &mut log_file {
            w.flush().map_err(io_err(path))?;
        }
        let val_cd = validation_cd(&model, val_set)?;
        if !val_cd.is_finite() {
            return Err(TrainError::NonFinite { epoch, step });
        }
        history.push(EpochSummary { epoch, val_cd });
        save(&model, &optimizer, epoch, LAST_CHECKPOINT)?;
        if val_cd < best_val {
            best_val = val_cd;
            best_epoch = epoch;
            best = model.clone();
            save(&model, &optimizer, epoch, BEST_CHECKPOINT)?;
        }
        if options.verbose {
            eprintln!("epoch {epoch}: lambda {lambda} val_cd {val_cd:.6e}");
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        best,
        best_epoch,
        history,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DatasetConfig, Split};
    use crate::deform::DeformConfig;
    use crate::gen_net::GenNetConfig;
    use crate::model::ModelConfig;

    pub(crate) fn smoke_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.data = DatasetConfig {
            samples: 10,
            partial_points: 48,
            complete_points: 128,
            ..DatasetConfig::default()
        };
        c.model = ModelConfig {
            input_points: 48,
            output_points: 64,
            control_points: 16,
            gen: GenNetConfig {
                depth: 2,
                c0: 8,
                d_mid: 16,
                feature_dim: 16,
                ..GenNetConfig::default()
            },
            deform: DeformConfig {
                k: 4,
                group_size: 4,
                feature_widths: vec![8],
                gcn_layers: 2,
                hidden: 16,
                ..DeformConfig::default()
            },
            ..ModelConfig::default()
        };
        c.train.epochs = 2;
        c.train.phase_switch = 1;
        c.train.batch_size = 4;
        c
    }

    #[test]
    fn smoke_run_is_deterministic_and_follows_schedule() {
        let config = smoke_config();
        let ds = generate_dataset(&config.dataset_config()).unwrap();
        let (tr, va) = (ds.split(Split::Train), ds.split(Split::Val));
        let dir = tempfile::tempdir().unwrap();
        let options = TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let a = train(&config, &tr, &va, &options).unwrap();
        let b = train(&config, &tr, &va, &TrainOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.history, b.history);
        assert_eq!(a.log.len(), 4);
        for row in &a.log {
            assert_eq!(row.lambda, if row.epoch <= 1 { 0.0 } else { 3.0 });
            let w = &config.train.loss;
            assert!((row.report.weighted_total(w, row.lambda) - row.report.total).abs() <= 1e-9 * row.report.total.max(1.0));
        }
        let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["epoch", "step", "lambda", "cd_intermediate", "cd_final", "match", "shape", "total"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let best = Checkpoint::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.epoch as usize, a.best_epoch);
        assert!(dir.path().join(LAST_CHECKPOINT).exists());
    }

    #[test]
    fn frozen_generation_keeps_encoder_and_decoder() {
        let mut config = smoke_config();
        config.train.epochs = 1;
        config.train.phase_switch = 0;
        let ds = generate_dataset(&config.dataset_config()).unwrap();
        let init = CompletionModel::new(config.model.clone(), 3).unwrap();
        let out = train(
            &config,
            &ds.split(Split::Train),
            &ds.split(Split::Val),
            &TrainOptions {
                freeze_generation: true,
                init: Some(init.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let mut changed = false;
        for id in init.store.ids() {
            let name = init.store.name(id);
            let same = init.store.get(id) == out.model.store.get(id);
            if name.starts_with("encoder.") || name.starts_with("decoder.") {
                assert!(same, "{name}");
            } else if init.store.is_trainable(id) {
                changed |= !same;
            }
        }
        assert!(changed);
    }

    #[test]
    fn empty_splits_rejected() {
        let config = smoke_config();
        assert!(matches!(
            train(&config, &[], &[], &TrainOptions::default()),
            Err(TrainError::EmptyTrainSplit)
        ));
    }
}
