//! Loss entry points over tape variables.

use super::tape::{Tape, Var};
use crate::error::{invalid, Result};

/// Class targets for cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    /// `rows × k` probability rows
    Soft(&'a [f64]),
}

/// Expand targets to `rows × k` probability rows, validating them.
pub fn target_rows(targets: &Targets<'_>, rows: usize, k: usize) -> Result<Vec<f64>> {
    match *targets {
        Targets::Hard(labels) => {
            if labels.len() != rows {
                return Err(invalid(format!("{} labels for {rows} rows", labels.len())));
            }
            let mut t = vec![0.0; rows * k];
            for (r, &c) in labels.iter().enumerate() {
                if c >= k {
                    return Err(invalid(format!("label {c} out of range for {k} classes")));
                }
                t[r * k + c] = 1.0;
            }
            Ok(t)
        }
        Targets::Soft(p) => {
            if p.len() != rows * k {
                return Err(invalid("soft targets do not match logits"));
            }
            for row in p.chunks(k) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| *v < 0.0) {
                    return Err(invalid(format!("soft target row sums to {s}")));
                }
            }
            Ok(p.to_vec())
        }
    }
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: Targets<'_>) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 {
        return Err(invalid("logits must be a matrix"));
    }
    let t = target_rows(&targets, s[0], s[1])?;
    tape.cross_entropy(logits, t)
}

/// Binary cross-entropy of the domain head with source = 1 and target = 0.
/// Routing both inputs through a gradient-reversal layer turns the single
/// minimisation into the feature/discriminator saddle point.
pub fn adversarial_loss(tape: &mut Tape, domain_logits_src: Var, domain_logits_tgt: Var) -> Result<Var> {
    tape.domain_bce(domain_logits_src, domain_logits_tgt)
}

pub fn supcon_loss(tape: &mut Tape, embeddings: Var, assignments: &[usize], tau: f64) -> Result<Var> {
    tape.supcon(embeddings, assignments.to_vec(), tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::Tensor;

    #[test]
    fn soft_target_at_softmax_gives_entropy() {
        let logits = vec![0.3, -1.0, 2.0, 0.5, 0.5, -0.2];
        let probs = crate::nnet::softmax_rows(&logits, 3);
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![2, 3], logits).unwrap(), true);
        let loss = cross_entropy(&mut tape, l, Targets::Soft(&probs)).unwrap();
        let mut entropy = 0.0;
        for p in &probs {
            entropy -= p * p.ln();
        }
        assert!((tape.value(loss).item() - entropy / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let logits = vec![0.3, -1.0, 2.0, 0.5, 0.5, -0.2];
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i < 3 { 17.0 } else { -4.5 })
            .collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], logits).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![2, 3], shifted).unwrap(), false);
        let la = cross_entropy(&mut tape, a, Targets::Hard(&[2, 0])).unwrap();
        let lb = cross_entropy(&mut tape, b, Targets::Hard(&[2, 0])).unwrap();
        assert!((tape.value(la).item() - tape.value(lb).item()).abs() < 1e-9);
    }

    #[test]
    fn invalid_targets() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 3]), false);
        assert!(cross_entropy(&mut tape, a, Targets::Hard(&[3])).is_err());
        assert!(cross_entropy(&mut tape, a, Targets::Soft(&[0.5, 0.4, 0.0])).is_err());
        let nan = tape.leaf(Tensor::from_parts(vec![1, 2], vec![f64::NAN, 0.0]), false);
        assert!(cross_entropy(&mut tape, nan, Targets::Hard(&[0])).is_err());
    }
}
