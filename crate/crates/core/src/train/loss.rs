use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Iteration weights `ω_t = λ^(T−t)` for t = 1..=T.
pub fn loss_weights(iterations: usize, lambda: f64) -> Vec<f64> {
    (1..=iterations).map(|t| lambda.powi((iterations - t) as i32)).collect()
}

/// `Σ_t ω_t·MSE(χ_t, χ_gt) + MSE(χ_final, χ_gt)`.
pub fn compute_loss<F: Real>(tape: &mut Tape<F>, latent: &[Var], chi_final: Var, chi_gt: Var, lambda: f64) -> Result<Var> {
    if latent.is_empty() {
        return Err(Error::shape("loss needs at least one latent output"));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::config(format!("loss decay lambda {lambda} outside (0, 1]")));
    }
    let mut total = tape.mse(chi_final, chi_gt)?;
    for (&chi_t, w) in latent.iter().zip(loss_weights(latent.len(), lambda)) {
        let m = tape.mse(chi_t, chi_gt)?;
        let term = tape.scale(m, F::from_f64_lossy(w))?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn weights_for_four_iterations() {
        assert_eq!(loss_weights(4, 0.5), vec![0.125, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn hand_evaluated_case() {
        // MSE against zero target: 4, 2, 1.
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::zeros(&[1, 1, 1, 1, 2]));
        let mk = |tape: &mut Tape<f64>, m: f64| tape.leaf(Tensor::full(&[1, 1, 1, 1, 2], m.sqrt()));
        let (l1, l2, lf) = (mk(&mut tape, 4.0), mk(&mut tape, 2.0), mk(&mut tape, 1.0));
        let loss = compute_loss(&mut tape, &[l1, l2], lf, gt, 0.5).unwrap();
        assert!((tape.value(loss).unwrap().data()[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_when_all_match() {
        let mut tape = Tape::<f64>::new();
        let v = Tensor::full(&[1, 1, 2, 2, 2], 0.3);
        let gt = tape.constant(v.clone());
        let a = tape.leaf(v.clone());
        let f = tape.leaf(v);
        let loss = compute_loss(&mut tape, &[a, a, a], f, gt, 0.5).unwrap();
        assert_eq!(tape.value(loss).unwrap().data()[0], 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let gt = tape.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
        let a = tape.leaf(Tensor::zeros(&[1, 1, 2, 2, 4]));
        assert!(matches!(compute_loss(&mut tape, &[a], a, gt, 0.5), Err(Error::Shape(_))));
    }
}
