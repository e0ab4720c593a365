//! The training driver: segmentation, bank compilation, dispatch, gradient
//! analysis and parameter updates, one epoch at a time.

pub mod bank;
pub mod config;
pub mod loss;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use thiserror::Error;

pub use bank::{analyze, build_circuit_bank, shift_rule, Analysis, CircuitBank, Model, PreparedSample, Role};
pub use config::{ConfigError, DatasetSpec, TrainConfig};
pub use loss::{loss_and_predict, raw_shift_term, Head, LossError};

use crate::circuit::{CircuitError, LogicalCircuit};
use crate::dataset::Dataset;
use crate::segmentation::{segment, SegmentError};
use crate::statevector::{sample_frequency, StateError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing result for circuit {0}")]
    Incomplete(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("circuit {circuit_id} failed after {attempts} attempts: {detail}")]
    Execution {
        circuit_id: String,
        attempts: u32,
        detail: String,
    },
    #[error("manager rejected circuit {circuit_id}: {detail}")]
    Rejected { circuit_id: String, detail: String },
}

/// Executes a list of circuits and returns every fidelity keyed by id.
pub trait Dispatcher {
    fn dispatch(&mut self, circuits: &[&LogicalCircuit]) -> Result<HashMap<String, f64>, DispatchError>;
}

/// Runs circuits in-process on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalDispatcher;

impl Dispatcher for LocalDispatcher {
    fn dispatch(&mut self, circuits: &[&LogicalCircuit]) -> Result<HashMap<String, f64>, DispatchError> {
        circuits
            .iter()
            .map(|c| {
                c.execute()
                    .map(|f| (c.circuit_id().to_owned(), f))
                    .map_err(|e: StateError| DispatchError::Execution {
                        circuit_id: c.circuit_id().to_owned(),
                        attempts: 1,
                        detail: e.to_string(),
                    })
            })
            .collect()
    }
}

/// `θ' = θ - α·g`.
pub fn update_params(params: &[f64], gradient: &[f64], alpha: f64) -> Result<Vec<f64>, TrainError> {
    if params.len() != gradient.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradient components",
            params.len(),
            gradient.len()
        )));
    }
    Ok(params.iter().zip(gradient).map(|(t, g)| t - alpha * g).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wall_seconds: f64,
    pub circuits_executed: usize,
    pub circuits_per_second: f64,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn new(epoch: usize, wall_seconds: f64, circuits: usize, loss: f64, accuracy: f64) -> Self {
        EpochMetrics {
            epoch,
            wall_seconds,
            circuits_executed: circuits,
            circuits_per_second: if wall_seconds > 0.0 {
                circuits as f64 / wall_seconds
            } else {
                0.0
            },
            loss,
            accuracy,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,wall_seconds,circuits,circuits_per_second,loss,accuracy";

pub fn write_metrics_csv<W: Write>(out: &mut W, rows: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in rows {
        write_metrics_row(out, m)?;
    }
    Ok(())
}

pub fn write_metrics_row<W: Write>(out: &mut W, m: &EpochMetrics) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{}",
        m.epoch, m.wall_seconds, m.circuits_executed, m.circuits_per_second, m.loss, m.accuracy
    )
}

/// Reads rows written by [`write_metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_HEADER => {}
        other => return Err(format!("unexpected metrics header {other:?}")),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || format!("metrics row {}: {line:?}", i + 1);
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                wall_seconds: num(f[1])?,
                circuits_executed: f[2].parse().map_err(|_| bad())?,
                circuits_per_second: num(f[3])?,
                loss: num(f[4])?,
                accuracy: num(f[5])?,
            })
        })
        .collect()
}

/// 64-bit FNV-1a, used to derive per-circuit seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Replaces exact fidelities by shot-sampled frequencies, clamped to the
/// SWAP-test range `[0.5, 1]`. The seed of each draw depends only on the
/// run seed and the circuit id.
pub fn apply_shots(results: &mut HashMap<String, f64>, shots: u64, seed: u64) {
    for (id, f) in results.iter_mut() {
        let s = seed ^ fnv1a(id.as_bytes());
        *f = sample_frequency(*f, shots, s).clamp(0.5, 1.0);
    }
}

/// Training state for one job.
pub struct Trainer<D: Dispatcher> {
    config: TrainConfig,
    dataset: Dataset,
    model: Model,
    dispatcher: D,
    job_id: String,
    epoch: usize,
}

impl<D: Dispatcher> Trainer<D> {
    pub fn new(config: TrainConfig, dataset: Dataset, dispatcher: D) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(TrainError::Argument("empty dataset".into()));
        }
        if let Some(l) = dataset.labels.iter().find(|l| !config.class_labels.contains(l)) {
            return Err(TrainError::Argument(format!("label {l} is not a configured class")));
        }
        let spec = config.layer_spec()?;
        let model = Model::init(
            spec,
            config.head,
            config.n_models(),
            config.n_filters,
            config.filter_width * config.filter_width,
            config.seed,
        );
        let job_id = config
            .client_id
            .clone()
            .unwrap_or_else(|| format!("job{}", config.seed));
        Ok(Trainer {
            config,
            dataset,
            model,
            dispatcher,
            job_id,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn set_model(&mut self, model: Model) {
        self.model = model;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dispatcher_mut(&mut self) -> &mut D {
        &mut self.dispatcher
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch
    }

    pub fn prepare_samples(&self) -> Result<Vec<PreparedSample>, TrainError> {
        self.dataset
            .images
            .iter()
            .zip(&self.dataset.labels)
            .enumerate()
            .map(|(x, (img, label))| {
                let label_index = self
                    .config
                    .class_labels
                    .iter()
                    .position(|l| l == label)
                    .expect("labels checked at construction");
                let patches = segment(x, img, self.config.stride, self.config.filter_width)?
                    .into_iter()
                    .map(|p| p.pixels)
                    .collect();
                Ok(PreparedSample { label_index, patches })
            })
            .collect()
    }

    /// Bank for the current parameters, without dispatching it.
    pub fn current_bank(&self) -> Result<CircuitBank, TrainError> {
        let prefix = format!("{}.e{}", self.job_id, self.epoch);
        build_circuit_bank(&prefix, &self.prepare_samples()?, &self.model, self.config.train_dense)
    }

    /// One pass over the dataset. Loss and accuracy describe the parameters
    /// the epoch started with; the update is applied before returning.
    /// Timing covers everything from segmentation to the update.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        let samples = self.prepare_samples()?;
        let prefix = format!("{}.e{}", self.job_id, self.epoch);
        let bank = build_circuit_bank(&prefix, &samples, &self.model, self.config.train_dense)?;
        let circuits: Vec<&LogicalCircuit> = bank.circuits().collect();
        let mut results = self.dispatcher.dispatch(&circuits)?;
        if let Some(shots) = self.config.shots {
            apply_shots(&mut results, shots, self.config.seed);
        }
        let analysis = analyze(&bank, &results, &samples, &self.model)?;
        self.apply(&analysis)?;
        let wall = start.elapsed().as_secs_f64();
        let metrics = EpochMetrics::new(self.epoch, wall, bank.len(), analysis.loss, analysis.accuracy);
        log::info!(
            "{} epoch {}: loss {:.6} accuracy {:.3} ({} circuits, {:.3} s)",
            self.job_id,
            self.epoch,
            metrics.loss,
            metrics.accuracy,
            metrics.circuits_executed,
            metrics.wall_seconds
        );
        self.epoch += 1;
        Ok(metrics)
    }

    pub fn train(&mut self) -> Result<Vec<EpochMetrics>, TrainError> {
        (0..self.config.epochs).map(|_| self.run_epoch()).collect()
    }

    fn apply(&mut self, analysis: &Analysis) -> Result<(), TrainError> {
        let alpha = self.config.alpha;
        let nf = self.model.n_filters();
        for (u, g) in analysis.gradient.iter().enumerate() {
            let (c, f) = (u / nf, u % nf);
            let next = update_params(self.model.params(c, f), g, alpha)?;
            *self.model.params_mut(c, f) = next;
        }
        if let Some(dense) = &analysis.dense_gradient {
            for (f, g) in dense.iter().enumerate() {
                let layer = self.model.dense_mut(f);
                let w = update_params(layer.weights(), &g.weights, alpha)?;
                let b = update_params(layer.bias(), &g.bias, alpha)?;
                layer.weights_mut().copy_from_slice(&w);
                layer.bias_mut().copy_from_slice(&b);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_examples() {
        assert_eq!(update_params(&[1.0], &[0.5], 0.1).unwrap(), vec![0.95]);
        assert_eq!(update_params(&[1.0, 2.0], &[0.0, 0.0], 0.1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(update_params(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(update_params(&[1.0], &[], 0.1), Err(TrainError::Shape(_))));
    }

    #[test]
    fn metrics_rate() {
        let m = EpochMetrics::new(0, 2.0, 9, 0.1, 1.0);
        assert_eq!(m.circuits_per_second, 4.5);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[m]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{METRICS_HEADER}\n0,2,9,4.5,0.1,1\n")
        );
    }

    #[test]
    fn shots_are_seeded_and_clamped() {
        let mut a: HashMap<String, f64> = [("x".to_string(), 0.5), ("y".to_string(), 0.9)].into();
        let mut b = a.clone();
        apply_shots(&mut a, 100, 4);
        apply_shots(&mut b, 100, 4);
        assert_eq!(a, b);
        assert!(a.values().all(|f| (0.5..=1.0).contains(f)));
    }
}
