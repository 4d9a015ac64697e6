//! Clipped surrogate loss with value and masked-entropy terms, and its gradient.

use ndarray::{Array1, Array2};

use super::dist::MaskedDistribution;
use super::net::PolicyParams;
use super::rollout::RolloutBatch;
use super::PpoError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoeffs {
    pub clip_eps: f64,
    pub vf_loss_coeff: f64,
    pub entropy_coeff: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossDiagnostics {
    pub loss: f64,
    /// Mean clipped surrogate (to be maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Mean of `log pi_old - log pi` over the batch.
    pub kl_estimate: f64,
}

/// Loss `-(L_clip - c1 L_vf + c2 S)` averaged over the batch.
pub fn ppo_loss(params: &PolicyParams, batch: &RolloutBatch, coeffs: &LossCoeffs) -> Result<LossDiagnostics, PpoError> {
    Ok(evaluate(params, batch, coeffs, false)?.0)
}

pub fn ppo_loss_and_grad(
    params: &PolicyParams,
    batch: &RolloutBatch,
    coeffs: &LossCoeffs,
) -> Result<(LossDiagnostics, PolicyParams), PpoError> {
    let (diag, grad) = evaluate(params, batch, coeffs, true)?;
    let grad = grad.expect("gradient requested");
    if grad.tensors().iter().any(|t| t.iter().any(|g| !g.is_finite())) {
        return Err(PpoError::NonFiniteGradient);
    }
    Ok((diag, grad))
}

fn evaluate(
    params: &PolicyParams,
    batch: &RolloutBatch,
    coeffs: &LossCoeffs,
    with_grad: bool,
) -> Result<(LossDiagnostics, Option<PolicyParams>), PpoError> {
    let n = batch.len();
    if n == 0 {
        return Err(PpoError::Shape("empty batch".into()));
    }
    let cache = params.forward_batch(&batch.observations);
    let k = params.num_actions();
    let mut d_logits = Array2::zeros((n, k));
    let mut d_values = Array1::zeros(n);
    let mut diag = LossDiagnostics::default();
    let inv_n = 1.0 / n as f64;
    let (lo, hi) = (1.0 - coeffs.clip_eps, 1.0 + coeffs.clip_eps);

    for i in 0..n {
        let dist = MaskedDistribution::new(cache.logits.row(i).as_slice().expect("row"), &batch.masks[i])?;
        let a = batch.actions[i];
        let logp = dist.log_prob(a);
        let adv = batch.advantages[i];
        let ratio = (logp - batch.log_prob_old[i]).exp();
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(lo, hi) * adv;
        let surrogate = surr1.min(surr2);
        let v_err = cache.values[i] - batch.value_targets[i];
        let entropy = dist.entropy();

        diag.surrogate += surrogate * inv_n;
        diag.value_loss += v_err * v_err * inv_n;
        diag.entropy += entropy * inv_n;
        diag.kl_estimate += (batch.log_prob_old[i] - logp) * inv_n;
        if ratio < lo || ratio > hi {
            diag.clip_fraction += inv_n;
        }

        if with_grad {
            // d loss / d log pi(a): the clipped branch carries no gradient
            let d_logp = if surr1 <= surr2 { -ratio * adv } else { 0.0 };
            let probs = dist.probs();
            for j in dist.mask().iter().map(|p| p.index()) {
                let p = probs[j];
                let onehot = if j == a { 1.0 } else { 0.0 };
                let d_entropy = -p * (dist.log_prob(j) + entropy);
                d_logits[[i, j]] = (d_logp * (onehot - p) - coeffs.entropy_coeff * d_entropy) * inv_n;
            }
            d_values[i] = 2.0 * coeffs.vf_loss_coeff * v_err * inv_n;
        }
    }
    diag.loss = -(diag.surrogate - coeffs.vf_loss_coeff * diag.value_loss + coeffs.entropy_coeff * diag.entropy);
    if !diag.loss.is_finite() {
        return Err(PpoError::NonFiniteLoss);
    }
    let grad = with_grad.then(|| params.backward(&cache, &d_logits, &d_values));
    Ok((diag, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_graph::PhaseMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_batch(params: &PolicyParams, n: usize, rng: &mut ChaCha8Rng) -> RolloutBatch {
        let d = params.input_len();
        let k = params.num_actions();
        let obs = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let mut b = RolloutBatch::with_capacity(d, n);
        for i in 0..n {
            let mut bits: Vec<bool> = (0..k).map(|_| rng.random_bool(0.6)).collect();
            let forced = rng.random_range(0..k);
            bits[forced] = true;
            let mask = PhaseMask::from_bools(&bits);
            let support: Vec<usize> = mask.iter().map(|p| p.index()).collect();
            let a = support[rng.random_range(0..support.len())];
            let (logits, _) = params.forward(obs.row(i).as_slice().unwrap());
            let logp = MaskedDistribution::new(&logits, &mask).unwrap().log_prob(a);
            b.push(obs.row(i).as_slice().unwrap(), a, mask, logp + rng.random_range(-0.4..0.4), 0.0, 0.0);
            b.advantages.push(rng.random_range(-2.0..2.0));
            b.value_targets.push(rng.random_range(-1.0..1.0));
        }
        b
    }

    #[test]
    fn unchanged_policy_gives_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PolicyParams::new(6, &[8], 5, &mut rng);
        let mut b = toy_batch(&p, 32, &mut rng);
        for i in 0..b.len() {
            let (logits, _) = p.forward(b.observations.row(i).as_slice().unwrap());
            b.log_prob_old[i] = MaskedDistribution::new(&logits, &b.masks[i]).unwrap().log_prob(b.actions[i]);
        }
        let coeffs = LossCoeffs { clip_eps: 0.2, vf_loss_coeff: 0.0, entropy_coeff: 0.0 };
        let d = ppo_loss(&p, &b, &coeffs).unwrap();
        let mean_adv = b.advantages.iter().sum::<f64>() / b.len() as f64;
        assert!((d.surrogate - mean_adv).abs() < 1e-12);
        assert_eq!(d.clip_fraction, 0.0);
        assert!(d.kl_estimate.abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams::new(8, &[8, 8], 6, &mut rng);
        let b = toy_batch(&p, 24, &mut rng);
        let coeffs = LossCoeffs { clip_eps: 0.2, vf_loss_coeff: 0.5, entropy_coeff: 0.05 };
        let (_, g) = ppo_loss_and_grad(&p, &b, &coeffs).unwrap();
        let analytic = g.to_flat();
        let theta = p.to_flat();
        let mut probe = p.clone();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] += h;
            probe.set_flat(&t);
            let up = ppo_loss(&probe, &b, &coeffs).unwrap().loss;
            t[i] -= 2.0 * h;
            probe.set_flat(&t);
            let down = ppo_loss(&probe, &b, &coeffs).unwrap().loss;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }
}
