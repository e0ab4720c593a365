//! Circuit bank compilation and gradient analysis.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::Head;
use super::TrainError;
use crate::circuit::{
    assemble_swap_circuit, build_layers, encode_features, shift_gate, shift_parameter, LayerSpec, LogicalCircuit,
};
use crate::segmentation::{squash_derivative, DenseLayer};
use crate::statevector::GateKind;

/// Shift terms `(quarter turns, coefficient)` whose weighted fidelities sum
/// to `dF/dθ` for a gate of `kind`.
///
/// Gates generated by a Pauli string (eigenvalues ±½) need two terms at
/// ±π/2. Controlled rotations have generator eigenvalues {0, ±½} and need
/// four: ±π/2 weighted `d1` and ±3π/2 weighted `d2`.
pub fn shift_rule(kind: GateKind) -> Vec<(i64, f64)> {
    if kind.is_controlled_rotation() {
        let s2 = std::f64::consts::SQRT_2;
        let d1 = (s2 + 1.0) / (4.0 * s2);
        let d2 = (s2 - 1.0) / (4.0 * s2);
        vec![(1, d1), (-1, -d1), (3, -d2), (-3, d2)]
    } else {
        vec![(1, 0.5), (-1, -0.5)]
    }
}

/// Trainable state of the classifier: one dense encoder per filter (shared
/// by all class models) and one parameter vector per (class model, filter).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: LayerSpec,
    head: Head,
    n_filters: usize,
    dense: Vec<DenseLayer>,
    params: Vec<Vec<f64>>,
}

impl Model {
    /// Dense weights from `U[0, π]`, quantum parameters from `U[0, π)`, all
    /// from one seeded stream.
    pub fn init(spec: LayerSpec, head: Head, n_models: usize, n_filters: usize, patch_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = (0..n_filters)
            .map(|_| DenseLayer::random(patch_len, spec.n_features(), &mut rng))
            .collect();
        let params = (0..n_models * n_filters)
            .map(|_| {
                (0..spec.param_count())
                    .map(|_| rng.gen::<f64>() * std::f64::consts::PI)
                    .collect()
            })
            .collect();
        Model {
            spec,
            head,
            n_filters,
            dense,
            params,
        }
    }

    pub fn from_parts(
        spec: LayerSpec,
        head: Head,
        dense: Vec<DenseLayer>,
        params: Vec<Vec<f64>>,
    ) -> Result<Self, TrainError> {
        let n_filters = dense.len();
        if n_filters == 0 || params.is_empty() || !params.len().is_multiple_of(n_filters) {
            return Err(TrainError::Shape(format!(
                "{} parameter vectors for {n_filters} filters",
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.len() != spec.param_count()) {
            return Err(TrainError::Shape(format!(
                "parameter vector of length {}, layer spec needs {}",
                p.len(),
                spec.param_count()
            )));
        }
        if dense.iter().any(|d| d.output_dim() != spec.n_features()) {
            return Err(TrainError::Shape("dense output does not match encoder width".into()));
        }
        Ok(Model {
            spec,
            head,
            n_filters,
            dense,
            params,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn n_models(&self) -> usize {
        self.params.len() / self.n_filters
    }

    pub fn dense(&self, filter: usize) -> &DenseLayer {
        &self.dense[filter]
    }

    pub fn dense_mut(&mut self, filter: usize) -> &mut DenseLayer {
        &mut self.dense[filter]
    }

    pub fn params(&self, class: usize, filter: usize) -> &[f64] {
        &self.params[class * self.n_filters + filter]
    }

    pub fn params_mut(&mut self, class: usize, filter: usize) -> &mut Vec<f64> {
        &mut self.params[class * self.n_filters + filter]
    }

    /// All parameter vectors, class-major.
    pub fn all_params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// The unshifted circuit for one (patch, filter, class).
    pub fn circuit(
        &self,
        id: String,
        patch: &[f64],
        filter: usize,
        class: usize,
    ) -> Result<LogicalCircuit, TrainError> {
        let angles = crate::segmentation::dense_forward(&self.dense[filter], patch)?;
        let encoding = encode_features(&angles, &self.spec.data_register())?;
        let layers = build_layers(&self.spec, self.params(class, filter))?;
        Ok(assemble_swap_circuit(id, &encoding, &layers, &self.spec)?)
    }
}

/// A segmented sample ready for encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Index into the configured label list.
    pub label_index: usize,
    pub patches: Vec<Vec<f64>>,
}

/// What a bank entry contributes to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Role {
    /// Unshifted evaluation used for loss and prediction.
    Base,
    /// Parameter `index` shifted by `turns · π/2`.
    Param { index: usize, turns: i64, coefficient: f64 },
    /// Encoding angle `index` shifted by `turns · π/2` (dense training).
    Encoding { index: usize, turns: i64, coefficient: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Role {
    pub fn is_shifted(&self) -> bool {
        !matches!(self, Role::Base)
    }

    pub fn direction(&self) -> Option<Direction> {
        match self {
            Role::Base => None,
            Role::Param { turns, .. } | Role::Encoding { turns, .. } => Some(if *turns > 0 {
                Direction::Forward
            } else {
                Direction::Backward
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub sample: usize,
    pub patch: usize,
    pub filter: usize,
    pub class: usize,
    pub role: Role,
    pub circuit: LogicalCircuit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircuitBank {
    pub entries: Vec<BankEntry>,
    pub n_samples: usize,
    pub n_filters: usize,
    pub n_models: usize,
    pub param_count: usize,
}

impl CircuitBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shifted_count(&self) -> usize {
        self.entries.iter().filter(|e| e.role.is_shifted()).count()
    }

    pub fn unshifted_count(&self) -> usize {
        self.len() - self.shifted_count()
    }

    pub fn circuits(&self) -> impl Iterator<Item = &LogicalCircuit> {
        self.entries.iter().map(|e| &e.circuit)
    }
}

/// Compiles the bank in submission order: filter, sample, class model,
/// patch; each base circuit is followed by its parameter shifts and, when
/// `train_dense` is set, its encoding-angle shifts.
///
/// Circuit ids are `<prefix>.f<filter>.x<sample>.c<class>.p<patch>` plus
/// the shift suffix.
pub fn build_circuit_bank(
    prefix: &str,
    samples: &[PreparedSample],
    model: &Model,
    train_dense: bool,
) -> Result<CircuitBank, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Argument("no samples to compile".into()));
    }
    let spec = model.spec();
    let n_enc = spec.n_features();
    let mut entries = Vec::new();
    for f in 0..model.n_filters() {
        for (x, sample) in samples.iter().enumerate() {
            for c in 0..model.n_models() {
                for (p, patch) in sample.patches.iter().enumerate() {
                    let id = format!("{prefix}.f{f}.x{x}.c{c}.p{p}");
                    let base = model.circuit(id, patch, f, c)?;
                    let mut push = |role, circuit| {
                        entries.push(BankEntry {
                            sample: x,
                            patch: p,
                            filter: f,
                            class: c,
                            role,
                            circuit,
                        })
                    };
                    for (k, b) in base.bindings().iter().enumerate() {
                        for (turns, coefficient) in shift_rule(base.gates()[b.gate_index].kind()) {
                            let shifted = shift_parameter(&base, k, turns as f64 * FRAC_PI_2)?;
                            push(
                                Role::Param {
                                    index: k,
                                    turns,
                                    coefficient,
                                },
                                shifted,
                            );
                        }
                    }
                    if train_dense {
                        for j in 0..n_enc {
                            for (turns, coefficient) in shift_rule(base.gates()[j].kind()) {
                                let shifted = shift_gate(&base, j, turns as f64 * FRAC_PI_2)?;
                                push(
                                    Role::Encoding {
                                        index: j,
                                        turns,
                                        coefficient,
                                    },
                                    shifted,
                                );
                            }
                        }
                    }
                    push(Role::Base, base);
                }
            }
        }
    }
    Ok(CircuitBank {
        entries,
        n_samples: samples.len(),
        n_filters: model.n_filters(),
        n_models: model.n_models(),
        param_count: spec.param_count(),
    })
}

/// Gradient of the dense encoder for one filter, same layout as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    /// Mean over samples of the mean-over-filters loss.
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// Class-major, like [`Model::all_params`].
    pub gradient: Vec<Vec<f64>>,
    /// Present when the bank carried encoding shifts.
    pub dense_gradient: Option<Vec<DenseGradient>>,
}

/// Pools patch fidelities, evaluates the head and chains parameter-shift
/// derivatives into the gradient of the mean loss.
pub fn analyze(
    bank: &CircuitBank,
    results: &HashMap<String, f64>,
    samples: &[PreparedSample],
    model: &Model,
) -> Result<Analysis, TrainError> {
    let (nx, nf, nc, nk) = (bank.n_samples, bank.n_filters, bank.n_models, bank.param_count);
    if samples.len() != nx || model.n_filters() != nf || model.n_models() != nc {
        return Err(TrainError::Shape("bank does not match samples/model".into()));
    }
    let n_enc = model.spec().n_features();
    let slot = |x: usize, f: usize, c: usize| (x * nf + f) * nc + c;
    let mut fid = vec![0.0; nx * nf * nc];
    let mut dparam = vec![vec![0.0; nk]; nx * nf * nc];
    let mut seen_base = vec![0usize; nx * nf * nc];
    let mut dangle: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for e in &bank.entries {
        let id = e.circuit.circuit_id();
        let r = *results.get(id).ok_or_else(|| TrainError::Incomplete(id.to_owned()))?;
        let n_patches = samples[e.sample].patches.len() as f64;
        let s = slot(e.sample, e.filter, e.class);
        match e.role {
            Role::Base => {
                fid[s] += r / n_patches;
                seen_base[s] += 1;
            }
            Role::Param { index, coefficient, .. } => dparam[s][index] += coefficient * r / n_patches,
            Role::Encoding { index, coefficient, .. } => {
                dangle.entry((s, e.patch)).or_insert_with(|| vec![0.0; n_enc])[index] += coefficient * r;
            }
        }
    }
    if let Some(s) = (0..fid.len()).find(|&s| seen_base[s] == 0) {
        return Err(TrainError::Incomplete(format!("no base evaluation for slot {s}")));
    }

    let head = model.head();
    let weight = 1.0 / (nx * nf) as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut predictions = Vec::with_capacity(nx);
    let mut gradient = vec![vec![0.0; nk]; nc * nf];
    let mut dense_grad: Vec<DenseGradient> = (0..nf)
        .map(|f| DenseGradient {
            weights: vec![0.0; model.dense(f).weights().len()],
            bias: vec![0.0; n_enc],
        })
        .collect();
    for (x, sample) in samples.iter().enumerate() {
        let mut pooled = vec![0.0; nc];
        for f in 0..nf {
            let fids: Vec<f64> = (0..nc).map(|c| fid[slot(x, f, c)]).collect();
            let eval = head.evaluate(&fids, sample.label_index)?;
            loss += eval.loss * weight;
            for c in 0..nc {
                pooled[c] += fids[c] / nf as f64;
                let g = weight * eval.dloss_dfidelity[c];
                if g == 0.0 {
                    continue;
                }
                for (acc, d) in gradient[c * nf + f].iter_mut().zip(&dparam[slot(x, f, c)]) {
                    *acc += g * d;
                }
                if dangle.is_empty() {
                    continue;
                }
                let layer = model.dense(f);
                let out = layer.output_dim();
                let n_patches = sample.patches.len() as f64;
                for (p, patch) in sample.patches.iter().enumerate() {
                    let Some(da) = dangle.get(&(slot(x, f, c), p)) else {
                        continue;
                    };
                    let y = layer.pre_activation(patch)?;
                    let dg = &mut dense_grad[f];
                    for j in 0..out {
                        let dy = g / n_patches * da[j] * squash_derivative(y[j]);
                        dg.bias[j] += dy;
                        for (i, h) in patch.iter().enumerate() {
                            dg.weights[i * out + j] += dy * h;
                        }
                    }
                }
            }
        }
        let predicted = head.evaluate(&pooled, sample.label_index)?.predicted;
        correct += usize::from(predicted == sample.label_index);
        predictions.push(predicted);
    }
    Ok(Analysis {
        loss,
        accuracy: correct as f64 / nx as f64,
        predictions,
        gradient,
        dense_gradient: (!dangle.is_empty()).then_some(dense_grad),
    })
}
