//! Logical circuits: data encoding, the variational layers, the SWAP-test
//! scaffold, parameter shifting and the canonical wire format.
//!
//! Register layout for a `qC`-qubit circuit with `m = (qC - 1) / 2`:
//! qubit 0 is the ancilla, qubits `1..=m` hold the encoded data and qubits
//! `m+1..=2m` hold the trainable model state.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::record::{RecordError, RecordReader, RecordWriter};
use crate::statevector::{Gate, GateKind, StateError, StateVector, DEFAULT_MAX_QUBITS};

/// First byte of every serialized circuit.
pub const CIRCUIT_FORMAT_VERSION: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("angle {angle} outside [0, π] at position {index}")]
    Range { index: usize, angle: f64 },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("register layout violation: {0}")]
    Layout(String),
    #[error("parameter index {index} out of range ({count} bindings)")]
    Index { index: usize, count: usize },
    #[error("unsupported circuit format version {0:#04x}")]
    Version(u8),
    #[error("malformed circuit: {0}")]
    Decode(#[from] RecordError),
}

/// Shape of a classifier circuit: total width and number of variational
/// layers (1: single-qubit unitaries, 2: + dual-qubit rotations,
/// 3: + controlled rotations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    n_layers: usize,
    qubit_count: usize,
}

impl LayerSpec {
    pub fn new(qubit_count: usize, n_layers: usize) -> Result<Self, CircuitError> {
        if !(1..=3).contains(&n_layers) {
            return Err(CircuitError::Argument(format!(
                "layer count must be 1, 2 or 3, got {n_layers}"
            )));
        }
        if qubit_count < 3 || qubit_count.is_multiple_of(2) {
            return Err(CircuitError::Argument(format!(
                "qubit count must be odd and at least 3, got {qubit_count}"
            )));
        }
        Ok(LayerSpec { n_layers, qubit_count })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn qubit_count(&self) -> usize {
        self.qubit_count
    }

    pub fn n_data_qubits(&self) -> usize {
        (self.qubit_count - 1) / 2
    }

    pub fn n_model_qubits(&self) -> usize {
        self.n_data_qubits()
    }

    pub fn ancilla(&self) -> usize {
        0
    }

    pub fn data_register(&self) -> Vec<usize> {
        (1..=self.n_data_qubits()).collect()
    }

    pub fn model_register(&self) -> Vec<usize> {
        let m = self.n_data_qubits();
        (m + 1..=2 * m).collect()
    }

    /// Rotation angles the encoder consumes (two per data qubit).
    pub fn n_features(&self) -> usize {
        2 * self.n_data_qubits()
    }

    pub fn param_count(&self) -> usize {
        let m = self.n_model_qubits();
        let pairs = m.saturating_sub(1);
        2 * m + if self.n_layers >= 2 { 2 * pairs } else { 0 } + if self.n_layers == 3 { 2 * pairs } else { 0 }
    }
}

/// Trainable parameter `param_index` lives in gate `gate_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBinding {
    pub param_index: usize,
    pub gate_index: usize,
}

/// Gates plus the parameter bindings that index into them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub gates: Vec<Gate>,
    pub bindings: Vec<ParamBinding>,
}

/// Dense-angle encoding: for data qubit `k`, `RY(angles[2k])` then
/// `RZ(angles[2k+1])` on `target_register[k]`.
pub fn encode_features(angles: &[f64], target_register: &[usize]) -> Result<Vec<Gate>, CircuitError> {
    if angles.len() != 2 * target_register.len() {
        return Err(CircuitError::Shape(format!(
            "{} angles for {} qubits (need two per qubit)",
            angles.len(),
            target_register.len()
        )));
    }
    if let Some((index, &angle)) = angles.iter().enumerate().find(|(_, a)| !(0.0..=PI).contains(*a)) {
        return Err(CircuitError::Range { index, angle });
    }
    Ok(target_register
        .iter()
        .enumerate()
        .flat_map(|(k, &q)| [Gate::ry(q, angles[2 * k]), Gate::rz(q, angles[2 * k + 1])])
        .collect())
}

/// Variational layers on the model register, parameters bound in gate order.
pub fn build_layers(spec: &LayerSpec, params: &[f64]) -> Result<LayerGates, CircuitError> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(CircuitError::Shape(format!(
            "{} parameters supplied, layer spec needs {expected}",
            params.len()
        )));
    }
    let model = spec.model_register();
    let mut gates = Vec::with_capacity(expected);
    for &q in &model {
        gates.push(Gate::ry(q, 0.0));
        gates.push(Gate::rz(q, 0.0));
    }
    if spec.n_layers >= 2 {
        for w in model.windows(2) {
            gates.push(Gate::ryy(w[0], w[1], 0.0));
            gates.push(Gate::rzz(w[0], w[1], 0.0));
        }
    }
    if spec.n_layers == 3 {
        for w in model.windows(2) {
            gates.push(Gate::cry(w[0], w[1], 0.0));
            gates.push(Gate::crz(w[0], w[1], 0.0));
        }
    }
    let gates: Vec<Gate> = gates.iter().zip(params).map(|(g, &p)| g.with_angle(p)).collect();
    let bindings = (0..gates.len())
        .map(|i| ParamBinding {
            param_index: i,
            gate_index: i,
        })
        .collect();
    Ok(LayerGates { gates, bindings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicalCircuit {
    circuit_id: String,
    qubit_demand: usize,
    gates: Vec<Gate>,
    bindings: Vec<ParamBinding>,
    ancilla: usize,
}

/// `encoding ∥ layers ∥ H(anc) · CSWAP(anc, data_k, model_k)… · H(anc)`.
pub fn assemble_swap_circuit(
    circuit_id: impl Into<String>,
    encoding: &[Gate],
    layers: &LayerGates,
    spec: &LayerSpec,
) -> Result<LogicalCircuit, CircuitError> {
    let data = spec.data_register();
    let model = spec.model_register();
    for g in encoding {
        if let Some(q) = g.targets().iter().find(|q| !data.contains(q)) {
            return Err(CircuitError::Layout(format!(
                "encoding gate `{g}` touches qubit {q} outside the data register"
            )));
        }
    }
    for g in &layers.gates {
        if let Some(q) = g.targets().iter().find(|q| !model.contains(q)) {
            return Err(CircuitError::Layout(format!(
                "layer gate `{g}` touches qubit {q} outside the model register"
            )));
        }
    }
    let anc = spec.ancilla();
    let mut gates = Vec::with_capacity(encoding.len() + layers.gates.len() + data.len() + 2);
    gates.extend_from_slice(encoding);
    gates.extend_from_slice(&layers.gates);
    gates.push(Gate::h(anc));
    for (&d, &m) in data.iter().zip(&model) {
        gates.push(Gate::cswap(anc, d, m));
    }
    gates.push(Gate::h(anc));
    let bindings = layers
        .bindings
        .iter()
        .map(|b| ParamBinding {
            param_index: b.param_index,
            gate_index: b.gate_index + encoding.len(),
        })
        .collect();
    LogicalCircuit::new(circuit_id.into(), spec.qubit_count(), gates, bindings, anc)
}

impl LogicalCircuit {
    /// Checks every structural invariant.
    pub fn new(
        circuit_id: String,
        qubit_demand: usize,
        gates: Vec<Gate>,
        bindings: Vec<ParamBinding>,
        ancilla: usize,
    ) -> Result<Self, CircuitError> {
        if circuit_id.is_empty() {
            return Err(CircuitError::Argument("empty circuit id".into()));
        }
        if qubit_demand < 3 || qubit_demand.is_multiple_of(2) || qubit_demand > DEFAULT_MAX_QUBITS {
            return Err(CircuitError::Argument(format!(
                "qubit demand {qubit_demand} is not an odd width in 3..={DEFAULT_MAX_QUBITS}"
            )));
        }
        if ancilla >= qubit_demand {
            return Err(CircuitError::Layout(format!(
                "ancilla {ancilla} outside {qubit_demand}-qubit circuit"
            )));
        }
        for g in &gates {
            g.validate(qubit_demand)
                .map_err(|e| CircuitError::Layout(format!("gate `{g}`: {e}")))?;
        }
        let mut seen_gate = vec![false; gates.len()];
        for (i, b) in bindings.iter().enumerate() {
            if b.param_index != i {
                return Err(CircuitError::Argument(format!(
                    "binding {i} names parameter {}; bindings must be listed in parameter order",
                    b.param_index
                )));
            }
            let g = gates
                .get(b.gate_index)
                .ok_or_else(|| CircuitError::Layout(format!("binding {i} points past the gate list")))?;
            if !g.kind().is_parametric() {
                return Err(CircuitError::Layout(format!(
                    "binding {i} points at non-parametric gate `{g}`"
                )));
            }
            if std::mem::replace(&mut seen_gate[b.gate_index], true) {
                return Err(CircuitError::Layout(format!("gate {} bound twice", b.gate_index)));
            }
        }
        Ok(LogicalCircuit {
            circuit_id,
            qubit_demand,
            gates,
            bindings,
            ancilla,
        })
    }

    pub fn circuit_id(&self) -> &str {
        &self.circuit_id
    }

    pub fn qubit_demand(&self) -> usize {
        self.qubit_demand
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn bindings(&self) -> &[ParamBinding] {
        &self.bindings
    }

    pub fn ancilla(&self) -> usize {
        self.ancilla
    }

    /// Current value of parameter `param_index`.
    pub fn param(&self, param_index: usize) -> Option<f64> {
        let b = self.bindings.get(param_index)?;
        self.gates[b.gate_index].angle()
    }

    pub fn params(&self) -> Vec<f64> {
        (0..self.bindings.len()).filter_map(|i| self.param(i)).collect()
    }

    pub fn with_id(&self, circuit_id: impl Into<String>) -> Result<Self, CircuitError> {
        let circuit_id = circuit_id.into();
        if circuit_id.is_empty() {
            return Err(CircuitError::Argument("empty circuit id".into()));
        }
        Ok(LogicalCircuit {
            circuit_id,
            ..self.clone()
        })
    }

    /// Runs the gate list on a fresh register and returns `P(ancilla = 0)`.
    pub fn execute(&self) -> Result<f64, StateError> {
        let mut state = StateVector::with_limit(self.qubit_demand, DEFAULT_MAX_QUBITS)?;
        state.run(&self.gates)?;
        state.prob_zero(self.ancilla)
    }

    /// Final statevector, for layout checks.
    pub fn final_state(&self) -> Result<StateVector, StateError> {
        let mut state = StateVector::with_limit(self.qubit_demand, DEFAULT_MAX_QUBITS)?;
        state.run(&self.gates)?;
        Ok(state)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = RecordWriter::with_prefix(CIRCUIT_FORMAT_VERSION);
        w.str("circuit_id", &self.circuit_id)
            .display("qubit_demand", self.qubit_demand)
            .display("ancilla", self.ancilla)
            .display("gates", self.gates.len());
        for g in &self.gates {
            w.display("gate", g);
        }
        w.display("bindings", self.bindings.len());
        for b in &self.bindings {
            w.str("binding", &format!("{} {}", b.param_index, b.gate_index));
        }
        w.finish()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, CircuitError> {
        let (&version, body) = bytes
            .split_first()
            .ok_or_else(|| RecordError::new(0, "empty circuit buffer"))?;
        if version != CIRCUIT_FORMAT_VERSION {
            return Err(CircuitError::Version(version));
        }
        let mut r = RecordReader::with_base(body, 1);
        let circuit_id = r.expect("circuit_id")?.as_str()?.to_owned();
        let qubit_demand: usize = r.expect("qubit_demand")?.parse_uint()?;
        let ancilla: usize = r.expect("ancilla")?.parse_uint()?;
        let n_gates: usize = r.expect("gates")?.parse_uint()?;
        let mut gates = Vec::with_capacity(n_gates.min(4096));
        for _ in 0..n_gates {
            let f = r.expect("gate")?;
            gates.push(parse_gate(f.as_str()?).map_err(|m| RecordError::new(f.offset, m))?);
        }
        let n_bindings: usize = r.expect("bindings")?.parse_uint()?;
        let mut bindings = Vec::with_capacity(n_bindings.min(4096));
        for _ in 0..n_bindings {
            let f = r.expect("binding")?;
            let text = f.as_str()?;
            let parsed = text.split_once(' ').and_then(|(p, g)| {
                Some(ParamBinding {
                    param_index: canonical_uint(p)?,
                    gate_index: canonical_uint(g)?,
                })
            });
            bindings.push(parsed.ok_or_else(|| RecordError::new(f.offset, format!("invalid binding {text:?}")))?);
        }
        r.finish()?;
        LogicalCircuit::new(circuit_id, qubit_demand, gates, bindings, ancilla)
    }
}

fn canonical_uint(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return None;
    }
    s.parse().ok()
}

fn parse_gate(text: &str) -> Result<Gate, String> {
    let mut parts = text.split(' ');
    let kind: GateKind = parts.next().unwrap_or_default().parse()?;
    let mut targets = Vec::with_capacity(kind.arity());
    for _ in 0..kind.arity() {
        let t = parts
            .next()
            .ok_or_else(|| format!("gate {text:?} is missing targets"))?;
        targets.push(canonical_uint(t).ok_or_else(|| format!("bad target {t:?}"))?);
    }
    let angle = if kind.is_parametric() {
        let a = parts
            .next()
            .ok_or_else(|| format!("gate {text:?} is missing its angle"))?;
        Some(crate::record::parse_f64(a).ok_or_else(|| format!("bad angle {a:?}"))?)
    } else {
        None
    };
    if parts.next().is_some() {
        return Err(format!("trailing tokens in gate {text:?}"));
    }
    let gate = Gate::new(kind, targets, angle)?;
    if gate.to_string() != text {
        return Err(format!("gate {text:?} is not in canonical form"));
    }
    Ok(gate)
}

/// Number of quarter turns in `delta`; shifts must be non-zero integer
/// multiples of π/2.
fn quarter_turns(delta: f64) -> Result<i64, CircuitError> {
    let turns = (delta / FRAC_PI_2).round();
    if turns == 0.0 || (delta - turns * FRAC_PI_2).abs() > 1e-9 {
        return Err(CircuitError::Argument(format!(
            "shift {delta} is not a non-zero multiple of π/2"
        )));
    }
    Ok(turns as i64)
}

/// Copy of `circuit` with parameter `param_index` moved by `delta` and an id
/// suffixed `@p<index><±turns>`, where `turns = delta / (π/2)`.
pub fn shift_parameter(
    circuit: &LogicalCircuit,
    param_index: usize,
    delta: f64,
) -> Result<LogicalCircuit, CircuitError> {
    let binding = circuit.bindings.get(param_index).copied().ok_or(CircuitError::Index {
        index: param_index,
        count: circuit.bindings.len(),
    })?;
    let turns = quarter_turns(delta)?;
    let mut out = circuit.clone();
    let gate = &mut out.gates[binding.gate_index];
    *gate = gate.with_angle(gate.angle().unwrap_or(0.0) + delta);
    out.circuit_id = format!("{}@p{}{:+}", circuit.circuit_id, param_index, turns);
    Ok(out)
}

/// Like [`shift_parameter`] but addresses any parametric gate by position
/// (used for encoding-angle gradients). Id suffix is `@g<gate><±turns>`.
pub fn shift_gate(circuit: &LogicalCircuit, gate_index: usize, delta: f64) -> Result<LogicalCircuit, CircuitError> {
    let g = circuit.gates.get(gate_index).ok_or(CircuitError::Index {
        index: gate_index,
        count: circuit.gates.len(),
    })?;
    if !g.kind().is_parametric() {
        return Err(CircuitError::Argument(format!("gate `{g}` has no angle")));
    }
    let turns = quarter_turns(delta)?;
    let mut out = circuit.clone();
    out.gates[gate_index] = g.with_angle(g.angle().unwrap_or(0.0) + delta);
    out.circuit_id = format!("{}@g{}{:+}", circuit.circuit_id, gate_index, turns);
    Ok(out)
}
