//! Classifier head: rescaled-fidelity cross-entropy and argmax prediction.

use thiserror::Error;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const CLIP: f64 = 1e-9;

/// Slack allowed outside the SWAP-test range `[0.5, 1]`.
pub const FIDELITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("fidelity {0} outside [0.5, 1]")]
    Range(f64),
    #[error("true class {index} out of range for {classes} classes")]
    Label { index: usize, classes: usize },
    #[error("head expects {expected} fidelities, got {got}")]
    Shape { expected: usize, got: usize },
}

/// How class models map onto labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// One model per label; prediction is the argmax fidelity.
    #[default]
    PerClass,
    /// Two labels, one model for the first; the second label is "not the
    /// first".
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub predicted: usize,
    /// `∂loss/∂F_c` for every class model.
    pub dloss_dfidelity: Vec<f64>,
}

fn check(f: f64) -> Result<(), LossError> {
    if !(0.5 - FIDELITY_SLACK..=1.0 + FIDELITY_SLACK).contains(&f) {
        return Err(LossError::Range(f));
    }
    Ok(())
}

/// Rescaled fidelity `p = 2(F - ½)`, clipped; also reports whether the clip
/// was active (the derivative is zero there).
fn rescale(f: f64) -> (f64, bool) {
    let p = 2.0 * (f - 0.5);
    let clipped = p.clamp(CLIP, 1.0 - CLIP);
    (clipped, clipped != p)
}

/// `loss = -ln(p_y) - Σ_{c≠y} ln(1 - p_c)`, prediction `argmax_c F_c` with
/// ties going to the lowest index.
pub fn loss_and_predict(fidelities: &[f64], true_index: usize) -> Result<(f64, usize), LossError> {
    let e = Head::PerClass.evaluate(fidelities, true_index)?;
    Ok((e.loss, e.predicted))
}

impl Head {
    pub fn n_models(&self, n_labels: usize) -> usize {
        match self {
            Head::PerClass => n_labels,
            Head::Binary => 1,
        }
    }

    pub fn evaluate(&self, fidelities: &[f64], true_index: usize) -> Result<LossEval, LossError> {
        fidelities.iter().try_for_each(|&f| check(f))?;
        match self {
            Head::PerClass => {
                if fidelities.is_empty() {
                    return Err(LossError::Shape { expected: 1, got: 0 });
                }
                if true_index >= fidelities.len() {
                    return Err(LossError::Label {
                        index: true_index,
                        classes: fidelities.len(),
                    });
                }
                let mut loss = 0.0;
                let mut grad = Vec::with_capacity(fidelities.len());
                for (c, &f) in fidelities.iter().enumerate() {
                    let (p, clipped) = rescale(f);
                    if c == true_index {
                        loss -= p.ln();
                        grad.push(if clipped { 0.0 } else { -2.0 / p });
                    } else {
                        loss -= (1.0 - p).ln();
                        grad.push(if clipped { 0.0 } else { 2.0 / (1.0 - p) });
                    }
                }
                let predicted = fidelities
                    .iter()
                    .enumerate()
                    .fold(0, |best, (c, &f)| if f > fidelities[best] { c } else { best });
                Ok(LossEval {
                    loss,
                    predicted,
                    dloss_dfidelity: grad,
                })
            }
            Head::Binary => {
                if fidelities.len() != 1 {
                    return Err(LossError::Shape {
                        expected: 1,
                        got: fidelities.len(),
                    });
                }
                if true_index > 1 {
                    return Err(LossError::Label {
                        index: true_index,
                        classes: 2,
                    });
                }
                let (p, clipped) = rescale(fidelities[0]);
                let (loss, g) = if true_index == 0 {
                    (-p.ln(), -2.0 / p)
                } else {
                    (-(1.0 - p).ln(), 2.0 / (1.0 - p))
                };
                Ok(LossEval {
                    loss,
                    predicted: if 2.0 * (fidelities[0] - 0.5) >= 0.5 { 0 } else { 1 },
                    dloss_dfidelity: vec![if clipped { 0.0 } else { g }],
                })
            }
        }
    }
}

/// `(F_fwd - F_bck) / 2`.
pub fn raw_shift_term(forward: f64, backward: f64) -> f64 {
    (forward - backward) / 2.0
}
