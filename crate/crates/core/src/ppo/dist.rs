//! Categorical distribution restricted to the phases a mask allows.

use rand::Rng;

use super::PpoError;
use crate::phase_graph::PhaseMask;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDistribution {
    mask: PhaseMask,
    probs: Vec<f64>,
    /// `-inf` for masked actions.
    log_probs: Vec<f64>,
}

impl MaskedDistribution {
    pub fn new(logits: &[f64], mask: &PhaseMask) -> Result<Self, PpoError> {
        if logits.len() != mask.len() {
            return Err(PpoError::Shape(format!("{} logits for a mask of {} phases", logits.len(), mask.len())));
        }
        if mask.is_empty() {
            return Err(PpoError::EmptyMask);
        }
        // masked logits are treated as -inf: they take no part in the
        // normalization, so their probability is exactly zero
        let support: Vec<usize> = mask.iter().map(|p| p.index()).collect();
        let max = support.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + support.iter().map(|&i| (logits[i] - max).exp()).sum::<f64>().ln();
        let mut probs = vec![0.0; logits.len()];
        let mut log_probs = vec![f64::NEG_INFINITY; logits.len()];
        for i in support {
            log_probs[i] = logits[i] - lse;
            probs[i] = log_probs[i].exp();
        }
        Ok(MaskedDistribution { mask: *mask, probs, log_probs })
    }

    pub fn mask(&self) -> &PhaseMask {
        &self.mask
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, action: usize) -> f64 {
        self.probs[action]
    }

    pub fn log_prob(&self, action: usize) -> f64 {
        self.log_probs[action]
    }

    /// Entropy over the allowed actions only.
    pub fn entropy(&self) -> f64 {
        -self.mask.iter().map(|p| self.probs[p.index()] * self.log_probs[p.index()]).sum::<f64>()
    }

    /// Inverse-CDF sample over allowed actions.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for i in self.mask.iter().map(|p| p.index()) {
            acc += self.probs[i];
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// Most likely allowed action, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = None;
        for i in self.mask.iter().map(|p| p.index()) {
            if best.is_none_or(|b: usize| self.probs[i] > self.probs[b]) {
                best = Some(i);
            }
        }
        best.expect("mask is non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intersection::PhaseId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8]) -> PhaseMask {
        PhaseMask::from_bools(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
    }

    #[test]
    fn uniform_logits_over_four() {
        let d = MaskedDistribution::new(&[0.3; 8], &mask(&[1, 1, 1, 1, 0, 0, 0, 0])).unwrap();
        assert_eq!(&d.probs()[4..], &[0.0; 4]);
        for &p in &d.probs()[..4] {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((d.entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_bit_is_certain() {
        let d = MaskedDistribution::new(&[5.0, -2.0, 9.0], &PhaseMask::single(3, PhaseId(2))).unwrap();
        assert_eq!(d.probs(), &[0.0, 1.0, 0.0]);
        assert_eq!(d.log_prob(1), 0.0);
        assert_eq!(d.entropy(), 0.0);
    }

    #[test]
    fn full_mask_is_plain_softmax() {
        let z = [0.5, -1.0, 2.0, 0.0];
        let d = MaskedDistribution::new(&z, &PhaseMask::full(4)).unwrap();
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for (i, v) in z.iter().enumerate() {
            assert!((d.prob(i) - v.exp() / s).abs() < 1e-15);
        }
        let h: f64 = -z.iter().map(|v| v.exp() / s * (v.exp() / s).ln()).sum::<f64>();
        assert!((d.entropy() - h).abs() < 1e-12);
    }

    #[test]
    fn large_masked_logit_gets_zero() {
        let d = MaskedDistribution::new(&[1e12, 0.0, 0.0], &mask(&[0, 1, 1])).unwrap();
        assert_eq!(d.prob(0), 0.0);
        assert!((d.prob(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(MaskedDistribution::new(&[0.0; 3], &PhaseMask::empty(3)), Err(PpoError::EmptyMask)));
    }

    #[test]
    fn samples_stay_on_support() {
        let d = MaskedDistribution::new(&[0.1, 2.0, -0.3, 0.7], &mask(&[1, 0, 1, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            counts[d.sample(&mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for i in [0, 2, 3] {
            assert!((counts[i] as f64 / 20_000.0 - d.prob(i)).abs() < 0.02);
        }
        assert_eq!(d.argmax(), 3);
    }
}
