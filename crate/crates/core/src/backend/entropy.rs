use super::BackendError;

const MASS_TOLERANCE: f64 = 1e-6;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Entropy estimate in nats from the top-k alternatives at one position.
///
/// Unreported mass is lumped into a single tail outcome, so the estimate
/// never exceeds `ln(k + 1)` and underestimates spread-out distributions.
pub fn estimate_entropy_topk(topk: &[(String, f64)]) -> Result<f64, BackendError> {
    let mut mass = 0.0;
    let mut h = 0.0;
    for (token, lp) in topk {
        if !lp.is_finite() && *lp != f64::NEG_INFINITY {
            return Err(BackendError::InvalidResponse(format!(
                "non-finite logprob {lp} for token {token:?}"
            )));
        }
        let p = lp.exp();
        mass += p;
        h += plogp(p);
    }
    if mass > 1.0 + MASS_TOLERANCE {
        return Err(BackendError::ProbabilityMass(mass));
    }
    Ok(h + plogp((1.0 - mass).max(0.0)))
}

/// Exact Shannon entropy of a full distribution, nats.
pub fn exact_entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| plogp(p)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tk(ps: &[f64]) -> Vec<(String, f64)> {
        ps.iter()
            .enumerate()
            .map(|(i, p)| (format!("t{i}"), p.ln()))
            .collect()
    }

    #[test]
    fn spot_values() {
        let ln2 = 2f64.ln();
        assert!((estimate_entropy_topk(&tk(&[0.5, 0.5])).unwrap() - ln2).abs() < 1e-12);
        // Half the mass in the tail: 2 * 0.25 ln 4 + 0.5 ln 2.
        let h = estimate_entropy_topk(&tk(&[0.25, 0.25])).unwrap();
        assert!((h - 1.039721).abs() < 1e-6);
        assert!(h < exact_entropy(&[0.25; 4]));
        assert_eq!(estimate_entropy_topk(&tk(&[1.0])).unwrap(), 0.0);
    }

    #[test]
    fn excess_mass_rejected() {
        assert!(matches!(
            estimate_entropy_topk(&tk(&[0.7, 0.7])),
            Err(BackendError::ProbabilityMass(_))
        ));
        assert!(estimate_entropy_topk(&tk(&[0.5, 0.5 + 5e-7])).is_ok());
    }

    proptest! {
        #[test]
        fn bounded_by_k_plus_one(raw in prop::collection::vec(0.001f64..1.0, 1..12)) {
            let total: f64 = raw.iter().sum::<f64>() * 1.2;
            let ps: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let h = estimate_entropy_topk(&tk(&ps)).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= ((ps.len() + 1) as f64).ln() + 1e-12);
        }
    }
}
