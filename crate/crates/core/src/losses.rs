//! Differentiable losses composed from tape primitives.
//!
//! All probability inputs are clamped to `[KL_EPS, 1]` before any log, both
//! as log argument and as multiplier, so one-hot rows stay finite. The clamp
//! is composed from relu/add/sub, which gives it the usual pass-through
//! gradient on unclamped entries.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// Probability floor applied before every log.
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyTermVariant {
    /// `Σ_k p̄_k log p̄_k` over the batch-mean prediction: minimizing it pushes
    /// the batch-average class usage toward uniform.
    Marginal,
    /// Batch mean of `Σ_k p log p`, the per-sample form taken literally.
    PerSampleLiteral,
    /// Mean per-sample entropy `−Σ_k p log p`: minimizing it pushes every
    /// prediction toward confidence (the conditional-entropy regularizer of
    /// the entropy-minimization literature).
    Conditional,
}

fn clamp_probs(tape: &mut Tape, probs: NodeId) -> NodeId {
    let floored = tape.clamp_min(probs, KL_EPS);
    tape.clamp_max(floored, 1.0)
}

fn check_rows(tape: &Tape, probs: NodeId, op: &'static str) -> Result<(usize, usize)> {
    let shape = tape.value(probs).shape();
    if shape.len() != 2 {
        return Err(Error::contract(format!("{op} expects [n×K] probabilities")));
    }
    Ok((shape[0], shape[1]))
}

/// Mean over rows of the symmetric KL divergence
/// `½(D_kl(p1‖p2) + D_kl(p2‖p1))`, differentiable through both arguments.
pub fn sensitivity(tape: &mut Tape, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    let (n, _) = check_rows(tape, p1, "sensitivity")?;
    if tape.value(p1).shape() != tape.value(p2).shape() {
        return Err(Error::shapes(
            "sensitivity",
            tape.value(p1).shape(),
            tape.value(p2).shape(),
        ));
    }
    let c1 = clamp_probs(tape, p1);
    let c2 = clamp_probs(tape, p2);
    let l1 = tape.log(c1);
    let l2 = tape.log(c2);
    let d12 = tape.sub(l1, l2)?;
    let d21 = tape.sub(l2, l1)?;
    let t1 = tape.mul(c1, d12)?;
    let t2 = tape.mul(c2, d21)?;
    let s = tape.add(t1, t2)?;
    let total = tape.sum(s);
    Ok(tape.scalar_mul(total, 0.5 / n as f64))
}

/// `−mean_i log p[i, labels[i]]`.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, k) = check_rows(tape, probs, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::contract(format!(
            "expected {n} labels, got {}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        onehot[i * k + label] = 1.0;
    }
    let onehot = tape.leaf(crate::tensor::Tensor::raw(vec![n, k], onehot));
    let clamped = clamp_probs(tape, probs);
    let logp = tape.log(clamped);
    let picked = tape.mul(onehot, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scalar_mul(total, -1.0 / n as f64))
}

/// Mean over rows of `−Σ_k p log p`.
pub fn entropy_per_sample(tape: &mut Tape, probs: NodeId) -> Result<NodeId> {
    let (n, _) = check_rows(tape, probs, "entropy_per_sample")?;
    let clamped = clamp_probs(tape, probs);
    let logp = tape.log(clamped);
    let plogp = tape.mul(clamped, logp)?;
    let total = tape.sum(plogp);
    Ok(tape.scalar_mul(total, -1.0 / n as f64))
}

/// The class-usage regularizer added to generator objectives. Both variants
/// equal `−log K` on uniform predictions and coincide for a single row.
pub fn class_balance_term(
    tape: &mut Tape,
    probs: NodeId,
    variant: EntropyTermVariant,
) -> Result<NodeId> {
    let (n, _) = check_rows(tape, probs, "class_balance_term")?;
    match variant {
        EntropyTermVariant::PerSampleLiteral => {
            let clamped = clamp_probs(tape, probs);
            let logp = tape.log(clamped);
            let plogp = tape.mul(clamped, logp)?;
            let total = tape.sum(plogp);
            Ok(tape.scalar_mul(total, 1.0 / n as f64))
        }
        EntropyTermVariant::Marginal => {
            let marginal = tape.col_mean(probs)?;
            let clamped = clamp_probs(tape, marginal);
            let logp = tape.log(clamped);
            let plogp = tape.mul(clamped, logp)?;
            Ok(tape.sum(plogp))
        }
        EntropyTermVariant::Conditional => entropy_per_sample(tape, probs),
    }
}

// ---------------------------------------------------------------------------
// Value-level wrappers (throwaway tape, same code path as the training losses)
// ---------------------------------------------------------------------------

/// Fraction of rows whose argmax matches the label, ties toward the lowest
/// class index.
pub fn accuracy(probs: &crate::tensor::Tensor, labels: &[usize]) -> f64 {
    let preds = probs.argmax_rows();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

pub fn cross_entropy_value(probs: &crate::tensor::Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone());
    let ce = cross_entropy(&mut tape, p, labels)?;
    tape.value(ce).scalar_value()
}

pub fn mean_entropy_value(probs: &crate::tensor::Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone());
    let h = entropy_per_sample(&mut tape, p)?;
    tape.value(h).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs(tape: &mut Tape, shape: &[usize], data: &[f64]) -> NodeId {
        tape.leaf(Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn scalar(tape: &Tape, id: NodeId) -> f64 {
        tape.value(id).scalar_value().unwrap()
    }

    #[test]
    fn sensitivity_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 2], &[0.3, 0.7, 0.9, 0.1]);
        let q = probs(&mut tape, &[2, 2], &[0.3, 0.7, 0.9, 0.1]);
        let s = sensitivity(&mut tape, p, q).unwrap();
        assert_eq!(scalar(&tape, s), 0.0);
    }

    #[test]
    fn sensitivity_hand_value() {
        // ½(KL(p‖q)+KL(q‖p)) for p=[.75,.25], q=[.25,.75] is 0.5·ln 3.
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 2], &[0.75, 0.25]);
        let q = probs(&mut tape, &[1, 2], &[0.25, 0.75]);
        let s = sensitivity(&mut tape, p, q).unwrap();
        assert!((scalar(&tape, s) - 0.5 * 3.0f64.ln()).abs() < 1e-6);
        assert!((scalar(&tape, s) - 0.549306).abs() < 1e-6);
    }

    #[test]
    fn sensitivity_is_bit_exactly_symmetric() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 3], &[0.5, 0.3, 0.2, 0.1, 0.1, 0.8]);
        let q = probs(&mut tape, &[2, 3], &[0.2, 0.5, 0.3, 0.6, 0.2, 0.2]);
        let s1 = sensitivity(&mut tape, p, q).unwrap();
        let s2 = sensitivity(&mut tape, q, p).unwrap();
        assert_eq!(
            scalar(&tape, s1).to_bits(),
            scalar(&tape, s2).to_bits()
        );
    }

    #[test]
    fn sensitivity_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 2], &[0.5, 0.5]);
        let q = probs(&mut tape, &[2, 2], &[0.5, 0.5, 0.5, 0.5]);
        assert!(sensitivity(&mut tape, p, q).is_err());
    }

    #[test]
    fn cross_entropy_certain_correct_prediction_is_zero() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 2], &[1.0, 0.0]);
        let ce = cross_entropy(&mut tape, p, &[0]).unwrap();
        assert_eq!(scalar(&tape, ce), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 2], &[0.5, 0.5, 0.5, 0.5]);
        let ce = cross_entropy(&mut tape, p, &[0, 1]).unwrap();
        assert!((scalar(&tape, ce) - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // −½(ln 0.9 + ln 0.8) ≈ 0.164252
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 2], &[0.9, 0.1, 0.2, 0.8]);
        let ce = cross_entropy(&mut tape, p, &[0, 1]).unwrap();
        let expect = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((scalar(&tape, ce) - expect).abs() < 1e-12);
        assert!((scalar(&tape, ce) - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 2], &[0.5, 0.5]);
        assert!(cross_entropy(&mut tape, p, &[2]).is_err());
    }

    #[test]
    fn entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 4], &[0.25; 8]);
        let h = entropy_per_sample(&mut tape, p).unwrap();
        assert!((scalar(&tape, h) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_near_zero() {
        // Each clamped zero entry contributes ε·|ln ε| ≈ 1.84e-7.
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let h = entropy_per_sample(&mut tape, p).unwrap();
        let v = scalar(&tape, h);
        assert!(v >= 0.0 && v < 2e-7, "entropy {v}");
    }

    #[test]
    fn entropy_hand_value() {
        // H(0.5, 0.25, 0.25) = 1.5·ln 2 ≈ 1.039721
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 3], &[0.5, 0.25, 0.25]);
        let h = entropy_per_sample(&mut tape, p).unwrap();
        assert!((scalar(&tape, h) - 1.5 * 2.0f64.ln()).abs() < 1e-12);
        assert!((scalar(&tape, h) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn balance_variants_agree_on_uniform() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[3, 2], &[0.5; 6]);
        let m = class_balance_term(&mut tape, p, EntropyTermVariant::Marginal).unwrap();
        let l = class_balance_term(&mut tape, p, EntropyTermVariant::PerSampleLiteral).unwrap();
        let expect = -(2.0f64.ln());
        assert!((scalar(&tape, m) - expect).abs() < 1e-12);
        assert!((scalar(&tape, l) - expect).abs() < 1e-12);
    }

    #[test]
    fn balance_variants_split_on_opposed_one_hots() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = class_balance_term(&mut tape, p, EntropyTermVariant::Marginal).unwrap();
        assert!((scalar(&tape, m) + 2.0f64.ln()).abs() < 1e-12);
        let l = class_balance_term(&mut tape, p, EntropyTermVariant::PerSampleLiteral).unwrap();
        assert!(scalar(&tape, l).abs() < 2e-7);
    }

    #[test]
    fn balance_variants_coincide_for_single_row() {
        let mut tape = Tape::new();
        let p = probs(&mut tape, &[1, 3], &[0.6, 0.3, 0.1]);
        let m = class_balance_term(&mut tape, p, EntropyTermVariant::Marginal).unwrap();
        let l = class_balance_term(&mut tape, p, EntropyTermVariant::PerSampleLiteral).unwrap();
        assert!((scalar(&tape, m) - scalar(&tape, l)).abs() < 1e-15);
    }
}
