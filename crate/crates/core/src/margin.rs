//! Margin statistics: per-instance margins, their mean and variance, the
//! max-abs normalized margins and the normalized margin variance (NMV).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the normalization denominator; an all-zero batch normalizes to
/// all zeros instead of dividing by zero.
pub const NORMALIZE_GUARD: f64 = 1e-12;

/// Linear classifier `wᵀφ(x) + b`. `w` is not required to be unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearHead {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        LinearHead { w, b }
    }

    pub fn decision(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.w.len() {
            return Err(Error::shape(
                "margin",
                format!("weight has {} entries, features have {}", self.w.len(), phi.len()),
            ));
        }
        Ok(dot(&self.w, phi) + self.b)
    }

    /// Margins for a batch of feature rows.
    pub fn margins(&self, features: &[Vec<f64>], labels: &[f64]) -> Result<Vec<f64>> {
        if features.len() != labels.len() {
            return Err(Error::shape(
                "margin",
                format!("{} feature rows vs {} labels", features.len(), labels.len()),
            ));
        }
        features
            .iter()
            .zip(labels)
            .map(|(phi, &y)| margin(self, phi, y))
            .collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y · (wᵀφ + b)` for a label `y ∈ {−1, +1}`.
pub fn margin(head: &LinearHead, phi: &[f64], y: f64) -> Result<f64> {
    if y != 1.0 && y != -1.0 {
        return Err(Error::InvalidArgument(format!("label must be ±1, got {y}")));
    }
    Ok(y * head.decision(phi)?)
}

fn non_empty(gamma: &[f64], op: &str) -> Result<()> {
    if gamma.is_empty() {
        Err(Error::InvalidArgument(format!("{op}: empty batch")))
    } else {
        Ok(())
    }
}

pub fn margin_mean(gamma: &[f64]) -> Result<f64> {
    non_empty(gamma, "margin_mean")?;
    Ok(gamma.iter().sum::<f64>() / gamma.len() as f64)
}

/// Population variance `(1/m) Σ (γᵢ − μ)²`.
pub fn margin_variance(gamma: &[f64]) -> Result<f64> {
    let mu = margin_mean(gamma)?;
    Ok(gamma.iter().map(|g| (g - mu) * (g - mu)).sum::<f64>() / gamma.len() as f64)
}

pub fn max_abs(gamma: &[f64]) -> f64 {
    gamma.iter().fold(0.0, |acc, g| acc.max(g.abs()))
}

/// Divides every margin by the batch's largest absolute margin (floored at
/// [`NORMALIZE_GUARD`]), so the result lies in `[−1, 1]`.
pub fn normalize_margins(gamma: &[f64]) -> Vec<f64> {
    let denom = max_abs(gamma).max(NORMALIZE_GUARD);
    gamma.iter().map(|g| g / denom).collect()
}

/// Normalized margin variance.
pub fn nmv(gamma: &[f64]) -> Result<f64> {
    non_empty(gamma, "nmv")?;
    margin_variance(&normalize_margins(gamma))
}

/// Fraction of margins that are not strictly positive.
pub fn classification_error(gamma: &[f64]) -> Result<f64> {
    non_empty(gamma, "classification_error")?;
    let wrong = gamma.iter().filter(|&&g| g.is_nan() || g <= 0.0).count();
    Ok(wrong as f64 / gamma.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax differs from the label.
pub fn multiclass_test_error(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (m, k) = logits.dims2()?;
    if k < 2 {
        return Err(Error::shape("multiclass_test_error", format!("need at least 2 classes, got {k}")));
    }
    if m != labels.len() {
        return Err(Error::shape(
            "multiclass_test_error",
            format!("{m} logit rows vs {} labels", labels.len()),
        ));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("multiclass_test_error: empty batch".into()));
    }
    let wrong = (0..m).filter(|&i| argmax(logits.row(i)) != labels[i]).count();
    Ok(wrong as f64 / m as f64)
}

/// Every margin statistic of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBatch {
    pub gamma: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub gamma_bar: Vec<f64>,
    pub mu_bar: f64,
    pub sigma_bar: f64,
    pub max_abs: f64,
    pub m: usize,
}

impl MarginBatch {
    pub fn from_margins(gamma: Vec<f64>) -> Result<Self> {
        let mu = margin_mean(&gamma)?;
        let sigma = margin_variance(&gamma)?;
        let gamma_bar = normalize_margins(&gamma);
        let mu_bar = margin_mean(&gamma_bar)?;
        let sigma_bar = margin_variance(&gamma_bar)?;
        Ok(MarginBatch {
            mu,
            sigma,
            mu_bar,
            sigma_bar,
            max_abs: max_abs(&gamma),
            m: gamma.len(),
            gamma_bar,
            gamma,
        })
    }

    pub fn error(&self) -> f64 {
        let wrong = self.gamma.iter().filter(|&&g| g <= 0.0).count();
        wrong as f64 / self.m as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn margin_examples() {
        let head = LinearHead::new(vec![1.0, 0.0], 0.0);
        assert_eq!(margin(&head, &[2.0, 3.0], 1.0).unwrap(), 2.0);
        assert_eq!(margin(&head, &[2.0, 3.0], -1.0).unwrap(), -2.0);
        assert!(margin(&head, &[2.0], 1.0).is_err());
        assert!(margin(&head, &[2.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn mean_and_variance_examples() {
        assert_eq!(margin_mean(&[1., 2., 3.]).unwrap(), 2.0);
        assert_eq!(margin_mean(&[-7.5]).unwrap(), -7.5);
        assert_eq!(margin_variance(&[1., 1., 1.]).unwrap(), 0.0);
        assert_eq!(margin_variance(&[1., -1.]).unwrap(), 1.0);
        // (4 + 0 + 4) / 3
        assert!((margin_variance(&[2., 4., 6.]).unwrap() - 8.0 / 3.0).abs() < 1e-15);
        assert!(margin_mean(&[]).is_err());
        assert!(margin_variance(&[]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_margins(&[2., -4., 1.]), vec![0.5, -1.0, 0.25]);
        assert_eq!(normalize_margins(&[0., 0., 0.]), vec![0., 0., 0.]);
    }

    #[test]
    fn nmv_examples() {
        assert_eq!(nmv(&[3., 3., 3.]).unwrap(), 0.0);
        assert_eq!(nmv(&[1., -1.]).unwrap(), 1.0);
        assert!(nmv(&[]).is_err());
    }

    #[test]
    fn classification_error_examples() {
        assert_eq!(classification_error(&[1., 2., 3.]).unwrap(), 0.0);
        assert_eq!(classification_error(&[-1., 1.]).unwrap(), 0.5);
        assert_eq!(classification_error(&[0.]).unwrap(), 1.0);
    }

    #[test]
    fn multiclass_error_examples() {
        let logits = Tensor::from_rows(&[vec![5., 0., 0.], vec![0., 5., 0.]]).unwrap();
        assert_eq!(multiclass_test_error(&logits, &[0, 1]).unwrap(), 0.0);
        let flat = Tensor::from_rows(&[vec![1., 1., 1.], vec![1., 1., 1.]]).unwrap();
        assert_eq!(multiclass_test_error(&flat, &[1, 2]).unwrap(), 1.0);
        assert_eq!(multiclass_test_error(&flat, &[0, 2]).unwrap(), 0.5);
        assert!(multiclass_test_error(&flat, &[0]).is_err());
        let one_col = Tensor::from_rows(&[vec![1.]]).unwrap();
        assert!(multiclass_test_error(&one_col, &[0]).is_err());
    }

    #[test]
    fn margin_batch_fields_agree() {
        let mb = MarginBatch::from_margins(vec![2., -4., 1.]).unwrap();
        assert_eq!(mb.max_abs, 4.0);
        assert_eq!(mb.gamma_bar, vec![0.5, -1.0, 0.25]);
        assert_eq!(mb.m, 3);
        assert!((mb.error() - 1.0 / 3.0).abs() < 1e-15);
    }

    fn margins() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..40)
    }

    proptest! {
        #[test]
        fn normalized_margins_in_unit_interval(gamma in margins()) {
            let bar = normalize_margins(&gamma);
            prop_assert!(bar.iter().all(|g| (-1.0..=1.0).contains(g)));
            if max_abs(&gamma) > NORMALIZE_GUARD {
                prop_assert!(bar.iter().any(|g| g.abs() == 1.0));
            }
        }

        #[test]
        fn power_of_two_scaling_is_exactly_invisible(gamma in margins(), e in -8i32..12) {
            let beta = 2f64.powi(e);
            let scaled: Vec<f64> = gamma.iter().map(|g| g * beta).collect();
            prop_assert_eq!(normalize_margins(&scaled), normalize_margins(&gamma));
            prop_assert_eq!(nmv(&scaled).unwrap(), nmv(&gamma).unwrap());
            prop_assert_eq!(margin_mean(&scaled).unwrap(), beta * margin_mean(&gamma).unwrap());
        }

        #[test]
        fn arbitrary_scaling_preserves_normalization(gamma in margins(), beta in 0.01f64..1000.0) {
            let scaled: Vec<f64> = gamma.iter().map(|g| g * beta).collect();
            for (a, b) in normalize_margins(&scaled).iter().zip(normalize_margins(&gamma)) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON);
            }
            prop_assert_eq!(
                classification_error(&scaled).unwrap(),
                classification_error(&gamma).unwrap()
            );
            let mu = margin_mean(&gamma).unwrap();
            let mu_scaled = margin_mean(&scaled).unwrap();
            prop_assert!((mu_scaled - beta * mu).abs() <= 1e-12 * (1.0 + (beta * mu).abs()));
        }

        #[test]
        fn nmv_is_variance_of_normalized(gamma in margins()) {
            let direct = nmv(&gamma).unwrap();
            let composed = margin_variance(&normalize_margins(&gamma)).unwrap();
            prop_assert_eq!(direct, composed);
            prop_assert!((0.0..=1.0).contains(&direct));
        }

        #[test]
        fn variance_is_translation_invariant(gamma in margins(), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = gamma.iter().map(|g| g + c).collect();
            let a = margin_variance(&gamma).unwrap();
            let b = margin_variance(&shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn margin_matches_dot_product(
            w in prop::collection::vec(-5.0f64..5.0, 1..10),
            b in -3.0f64..3.0,
            positive in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let phi: Vec<f64> = (0..w.len()).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let y = if positive { 1.0 } else { -1.0 };
            let mut expected = b;
            for i in 0..w.len() {
                expected += w[i] * phi[i];
            }
            let head = LinearHead::new(w, b);
            prop_assert!((margin(&head, &phi, y).unwrap() - y * expected).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_error_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k) = (rng.random_range(1..30), rng.random_range(2..8));
            let data: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2..3) as f64).collect();
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let logits = Tensor::new([m, k], data.clone()).unwrap();
            let mut wrong = 0;
            for i in 0..m {
                let row = &data[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 0..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best != labels[i] {
                    wrong += 1;
                }
            }
            assert_eq!(multiclass_test_error(&logits, &labels).unwrap(), wrong as f64 / m as f64);
        }
    }
}
