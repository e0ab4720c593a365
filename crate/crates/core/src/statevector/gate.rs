use std::fmt;
use std::str::FromStr;

/// The gate kinds the workload needs: encoding rotations, the three
/// variational layer families and the SWAP-test scaffold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GateKind {
    H,
    Rx,
    Ry,
    Rz,
    Ryy,
    Rzz,
    Cry,
    Crz,
    Cswap,
}

impl GateKind {
    pub const ALL: [GateKind; 9] = [
        GateKind::H,
        GateKind::Rx,
        GateKind::Ry,
        GateKind::Rz,
        GateKind::Ryy,
        GateKind::Rzz,
        GateKind::Cry,
        GateKind::Crz,
        GateKind::Cswap,
    ];

    pub fn arity(self) -> usize {
        match self {
            GateKind::H | GateKind::Rx | GateKind::Ry | GateKind::Rz => 1,
            GateKind::Ryy | GateKind::Rzz | GateKind::Cry | GateKind::Crz => 2,
            GateKind::Cswap => 3,
        }
    }

    pub fn is_parametric(self) -> bool {
        !matches!(self, GateKind::H | GateKind::Cswap)
    }

    /// Controlled rotations have generator spectrum {0, ±1/2}; every other
    /// parametric kind is `exp(-iθ/2 · P)` with `P² = I`.
    pub fn is_controlled_rotation(self) -> bool {
        matches!(self, GateKind::Cry | GateKind::Crz)
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::H => "H",
            GateKind::Rx => "RX",
            GateKind::Ry => "RY",
            GateKind::Rz => "RZ",
            GateKind::Ryy => "RYY",
            GateKind::Rzz => "RZZ",
            GateKind::Cry => "CRY",
            GateKind::Crz => "CRZ",
            GateKind::Cswap => "CSWAP",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GateKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown gate kind `{s}`"))
    }
}

/// A gate with its operand qubits. Two-qubit controlled kinds take
/// `(control, target)`; `CSWAP` takes `(control, a, b)`.
///
/// Construction does not check the targets against a register; that happens
/// when the gate is applied (see [`Gate::validate`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    kind: GateKind,
    targets: Vec<usize>,
    angle: Option<f64>,
}

impl Gate {
    /// Generic constructor used by decoders; checks arity and angle presence.
    pub fn new(kind: GateKind, targets: Vec<usize>, angle: Option<f64>) -> Result<Self, String> {
        if targets.len() != kind.arity() {
            return Err(format!(
                "{kind} takes {} target(s), got {}",
                kind.arity(),
                targets.len()
            ));
        }
        match (kind.is_parametric(), angle) {
            (true, None) => return Err(format!("{kind} requires an angle")),
            (false, Some(_)) => return Err(format!("{kind} takes no angle")),
            (true, Some(a)) if !a.is_finite() => return Err(format!("{kind} angle is not finite")),
            _ => {}
        }
        Ok(Gate { kind, targets, angle })
    }

    pub fn h(q: usize) -> Self {
        Gate {
            kind: GateKind::H,
            targets: vec![q],
            angle: None,
        }
    }

    pub fn rx(q: usize, theta: f64) -> Self {
        Self::rot(GateKind::Rx, vec![q], theta)
    }

    pub fn ry(q: usize, theta: f64) -> Self {
        Self::rot(GateKind::Ry, vec![q], theta)
    }

    pub fn rz(q: usize, theta: f64) -> Self {
        Self::rot(GateKind::Rz, vec![q], theta)
    }

    pub fn ryy(a: usize, b: usize, theta: f64) -> Self {
        Self::rot(GateKind::Ryy, vec![a, b], theta)
    }

    pub fn rzz(a: usize, b: usize, theta: f64) -> Self {
        Self::rot(GateKind::Rzz, vec![a, b], theta)
    }

    pub fn cry(control: usize, target: usize, theta: f64) -> Self {
        Self::rot(GateKind::Cry, vec![control, target], theta)
    }

    pub fn crz(control: usize, target: usize, theta: f64) -> Self {
        Self::rot(GateKind::Crz, vec![control, target], theta)
    }

    pub fn cswap(control: usize, a: usize, b: usize) -> Self {
        Gate {
            kind: GateKind::Cswap,
            targets: vec![control, a, b],
            angle: None,
        }
    }

    fn rot(kind: GateKind, targets: Vec<usize>, theta: f64) -> Self {
        Gate {
            kind,
            targets,
            angle: Some(theta),
        }
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn angle(&self) -> Option<f64> {
        self.angle
    }

    /// Returns a copy with the angle replaced. Non-parametric gates are
    /// returned unchanged.
    pub fn with_angle(&self, theta: f64) -> Self {
        let mut g = self.clone();
        if g.kind.is_parametric() {
            g.angle = Some(theta);
        }
        g
    }

    /// Same gate acting on relabelled qubits: `q -> q + offset`.
    pub fn offset(&self, offset: usize) -> Self {
        Gate {
            kind: self.kind,
            targets: self.targets.iter().map(|q| q + offset).collect(),
            angle: self.angle,
        }
    }

    /// Checks the targets against a register of `n_qubits`.
    pub fn validate(&self, n_qubits: usize) -> Result<(), super::StateError> {
        for (i, &q) in self.targets.iter().enumerate() {
            if q >= n_qubits {
                return Err(super::StateError::QubitOutOfRange { qubit: q, n_qubits });
            }
            if self.targets[..i].contains(&q) {
                return Err(super::StateError::RepeatedTarget { qubit: q });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        for q in &self.targets {
            write!(f, " {q}")?;
        }
        if let Some(a) = self.angle {
            write!(f, " {a:?}")?;
        }
        Ok(())
    }
}
