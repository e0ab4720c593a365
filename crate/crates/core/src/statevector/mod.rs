//! Dense statevector simulation for the gate set used by the classifier
//! circuits, plus the SWAP-test fidelity measurement.
//!
//! Qubit `k` is bit `k` of the basis-state index (qubit 0 is the least
//! significant bit). Gate matrices:
//!
//! ```text
//! RX(θ)  = [[c, -i s], [-i s, c]]          c = cos θ/2, s = sin θ/2
//! RY(θ)  = [[c, -s], [s, c]]
//! RZ(θ)  = diag(e^{-iθ/2}, e^{iθ/2})
//! RYY(θ) = exp(-i θ/2 · Y⊗Y)
//! RZZ(θ) = exp(-i θ/2 · Z⊗Z)
//! CRY/CRZ(θ) apply RY/RZ to the second operand when the first is |1⟩
//! ```

mod gate;

pub use gate::{Gate, GateKind};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

/// Largest register a worker will allocate (2^24 amplitudes, 256 MiB).
pub const DEFAULT_MAX_QUBITS: usize = 24;

/// Seed used for shot sampling when the caller supplies none.
pub const DEFAULT_SHOT_SEED: u64 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("register of {requested} qubits outside supported range 1..={max}")]
    Capacity { requested: usize, max: usize },
    #[error("qubit {qubit} out of range for a {n_qubits}-qubit register")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },
    #[error("qubit {qubit} used twice by one gate")]
    RepeatedTarget { qubit: usize },
    #[error("register shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

/// `|0…0⟩` on `n_qubits`, capped at [`DEFAULT_MAX_QUBITS`].
pub fn new_state(n_qubits: usize) -> Result<StateVector, StateError> {
    StateVector::with_limit(n_qubits, DEFAULT_MAX_QUBITS)
}

/// Pure form of [`StateVector::apply`].
pub fn apply_gate(state: &StateVector, gate: &Gate) -> Result<StateVector, StateError> {
    let mut next = state.clone();
    next.apply(gate)?;
    Ok(next)
}

impl StateVector {
    pub fn with_limit(n_qubits: usize, max_qubits: usize) -> Result<Self, StateError> {
        if n_qubits == 0 || n_qubits > max_qubits {
            return Err(StateError::Capacity {
                requested: n_qubits,
                max: max_qubits,
            });
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(StateVector { n_qubits, amplitudes })
    }

    /// Wraps caller-supplied amplitudes. The length must be a power of two
    /// and the vector must be normalized within 1e-9.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self, StateError> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(StateError::Shape(format!(
                "amplitude count {len} is not a power of two >= 2"
            )));
        }
        let n_qubits = len.trailing_zeros() as usize;
        if n_qubits > DEFAULT_MAX_QUBITS {
            return Err(StateError::Capacity {
                requested: n_qubits,
                max: DEFAULT_MAX_QUBITS,
            });
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(StateError::Argument(format!("state norm {norm} != 1")));
        }
        Ok(StateVector { n_qubits, amplitudes })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> Result<Complex64, StateError> {
        if self.n_qubits != other.n_qubits {
            return Err(StateError::Shape(format!(
                "{} vs {} qubits",
                self.n_qubits, other.n_qubits
            )));
        }
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// Applies each gate in order.
    pub fn run<'a>(&mut self, gates: impl IntoIterator<Item = &'a Gate>) -> Result<(), StateError> {
        for g in gates {
            self.apply(g)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, gate: &Gate) -> Result<(), StateError> {
        gate.validate(self.n_qubits)?;
        let t = gate.targets();
        let theta = gate.angle().unwrap_or(0.0);
        let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        let i = Complex64::i();
        match gate.kind() {
            GateKind::H => {
                let r = std::f64::consts::FRAC_1_SQRT_2;
                self.single(t[0], [[r.into(), r.into()], [r.into(), (-r).into()]]);
            }
            GateKind::Rx => self.single(t[0], [[c.into(), -i * s], [-i * s, c.into()]]),
            GateKind::Ry => self.single(t[0], [[c.into(), (-s).into()], [s.into(), c.into()]]),
            GateKind::Rz => self.single(t[0], rz_matrix(theta)),
            GateKind::Ryy => self.ryy(t[0], t[1], c, s),
            GateKind::Rzz => self.rzz(t[0], t[1], theta),
            GateKind::Cry => self.controlled(t[0], t[1], [[c.into(), (-s).into()], [s.into(), c.into()]]),
            GateKind::Crz => self.controlled(t[0], t[1], rz_matrix(theta)),
            GateKind::Cswap => self.cswap(t[0], t[1], t[2]),
        }
        Ok(())
    }

    /// Probability that measuring `qubit` yields 0.
    pub fn prob_zero(&self, qubit: usize) -> Result<f64, StateError> {
        if qubit >= self.n_qubits {
            return Err(StateError::QubitOutOfRange {
                qubit,
                n_qubits: self.n_qubits,
            });
        }
        let mask = 1usize << qubit;
        let p: f64 = self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx & mask == 0)
            .map(|(_, a)| a.norm_sqr())
            .sum();
        Ok(p.clamp(0.0, 1.0))
    }

    fn single(&mut self, q: usize, m: [[Complex64; 2]; 2]) {
        let mask = 1usize << q;
        for idx in 0..self.amplitudes.len() {
            if idx & mask == 0 {
                let (a0, a1) = (self.amplitudes[idx], self.amplitudes[idx | mask]);
                self.amplitudes[idx] = m[0][0] * a0 + m[0][1] * a1;
                self.amplitudes[idx | mask] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    fn controlled(&mut self, control: usize, target: usize, m: [[Complex64; 2]; 2]) {
        let (cm, tm) = (1usize << control, 1usize << target);
        for idx in 0..self.amplitudes.len() {
            if idx & cm != 0 && idx & tm == 0 {
                let (a0, a1) = (self.amplitudes[idx], self.amplitudes[idx | tm]);
                self.amplitudes[idx] = m[0][0] * a0 + m[0][1] * a1;
                self.amplitudes[idx | tm] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
    }

    fn ryy(&mut self, qa: usize, qb: usize, c: f64, s: f64) {
        // cos(θ/2)·I − i sin(θ/2)·Y⊗Y, where Y⊗Y maps |00⟩→−|11⟩, |11⟩→−|00⟩,
        // |01⟩→|10⟩, |10⟩→|01⟩.
        let (ma, mb) = (1usize << qa, 1usize << qb);
        let is = Complex64::new(0.0, s);
        for idx in 0..self.amplitudes.len() {
            if idx & ma == 0 && idx & mb == 0 {
                let (i00, i01, i10, i11) = (idx, idx | mb, idx | ma, idx | ma | mb);
                let (a00, a01, a10, a11) = (
                    self.amplitudes[i00],
                    self.amplitudes[i01],
                    self.amplitudes[i10],
                    self.amplitudes[i11],
                );
                self.amplitudes[i00] = a00 * c + is * a11;
                self.amplitudes[i11] = a11 * c + is * a00;
                self.amplitudes[i01] = a01 * c - is * a10;
                self.amplitudes[i10] = a10 * c - is * a01;
            }
        }
    }

    fn rzz(&mut self, qa: usize, qb: usize, theta: f64) {
        let (ma, mb) = (1usize << qa, 1usize << qb);
        let even = Complex64::from_polar(1.0, -theta / 2.0);
        let odd = Complex64::from_polar(1.0, theta / 2.0);
        for (idx, amp) in self.amplitudes.iter_mut().enumerate() {
            let parity = ((idx & ma != 0) as u8) ^ ((idx & mb != 0) as u8);
            *amp *= if parity == 0 { even } else { odd };
        }
    }

    fn cswap(&mut self, control: usize, a: usize, b: usize) {
        let (cm, am, bm) = (1usize << control, 1usize << a, 1usize << b);
        for idx in 0..self.amplitudes.len() {
            if idx & cm != 0 && idx & am != 0 && idx & bm == 0 {
                self.amplitudes.swap(idx, (idx & !am) | bm);
            }
        }
    }
}

fn rz_matrix(theta: f64) -> [[Complex64; 2]; 2] {
    let zero = Complex64::new(0.0, 0.0);
    [
        [Complex64::from_polar(1.0, -theta / 2.0), zero],
        [zero, Complex64::from_polar(1.0, theta / 2.0)],
    ]
}

/// SWAP-test estimate of `½ + ½|⟨ψ|φ⟩|²`.
///
/// Builds the `1 + 2n` register (ancilla on qubit 0, ψ on `1..=n`, φ on
/// `n+1..=2n`), runs H, the CSWAP ladder and H, and reads `P(ancilla = 0)`.
/// With `shots`, returns the ancilla-0 frequency of that many seeded
/// Bernoulli draws instead.
pub fn swap_test_fidelity(
    psi: &StateVector,
    phi: &StateVector,
    shots: Option<u64>,
    seed: Option<u64>,
) -> Result<f64, StateError> {
    if psi.n_qubits != phi.n_qubits {
        return Err(StateError::Shape(format!(
            "swap test needs equal registers, got {} and {} qubits",
            psi.n_qubits, phi.n_qubits
        )));
    }
    if shots == Some(0) {
        return Err(StateError::Argument("shots must be positive".into()));
    }
    let n = psi.n_qubits;
    let total = 1 + 2 * n;
    if total > DEFAULT_MAX_QUBITS {
        return Err(StateError::Capacity {
            requested: total,
            max: DEFAULT_MAX_QUBITS,
        });
    }
    let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << total];
    for (i, a) in psi.amplitudes.iter().enumerate() {
        for (j, b) in phi.amplitudes.iter().enumerate() {
            amplitudes[(i << 1) | (j << (1 + n))] = a * b;
        }
    }
    let mut joint = StateVector {
        n_qubits: total,
        amplitudes,
    };
    joint.apply(&Gate::h(0))?;
    for k in 0..n {
        joint.apply(&Gate::cswap(0, 1 + k, 1 + n + k))?;
    }
    joint.apply(&Gate::h(0))?;
    let p0 = joint.prob_zero(0)?;
    match shots {
        None => Ok(p0),
        Some(shots) => Ok(sample_frequency(p0, shots, seed.unwrap_or(DEFAULT_SHOT_SEED))),
    }
}

/// Frequency of successes over `shots` Bernoulli(p) draws from a seeded
/// stream.
pub fn sample_frequency(p: f64, shots: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Binomial::new(shots, p.clamp(0.0, 1.0)).expect("p clamped to [0,1]");
    dist.sample(&mut rng) as f64 / shots as f64
}
