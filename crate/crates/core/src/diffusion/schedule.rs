//! Linear variance schedule and the closed-form forward/reverse updates.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;

/// `β_η` for `η = 1..=H`, with `α_η = 1 - β_η` and `ᾱ_η = Π_{s≤η} α_s`.
/// Index 0 holds the convention `β_0 = 0`, `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be at least 1".into()));
        }
        let ordered = if steps == 1 {
            beta_start <= beta_end
        } else {
            beta_start < beta_end
        };
        if !(beta_start > 0.0 && beta_end < 1.0 && ordered) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = vec![0.0];
        betas.extend((0..steps).map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        }));
        let mut alpha_bars = vec![1.0];
        for b in &betas[1..] {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, eta: usize) -> f64 {
        self.betas[eta]
    }

    pub fn alpha(&self, eta: usize) -> f64 {
        1.0 - self.betas[eta]
    }

    pub fn alpha_bar(&self, eta: usize) -> f64 {
        self.alpha_bars[eta]
    }

    fn check_step(&self, eta: usize) -> Result<()> {
        if eta == 0 || eta > self.steps() {
            return Err(Error::Invalid(format!("step {eta} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// `y_η = sqrt(ᾱ_η) y_0 + sqrt(1 - ᾱ_η) ε`.
pub fn forward_noise(y0: &[f64], eta: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len(y0.len(), eps.len())?;
    schedule.check_step(eta)?;
    let ab = schedule.alpha_bar(eta);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

/// Ancestral update `y_{η-1} = (y_η - β/sqrt(1-ᾱ_η) ε̂)/sqrt(α_η) + sqrt(β_η) z`.
/// `z = None` means a zero draw.
pub fn ddpm_step(y: &[f64], eta: usize, eps_hat: &[f64], z: Option<&[f64]>, schedule: &NoiseSchedule) -> Vec<f64> {
    let beta = schedule.beta(eta);
    let c_eps = beta / (1.0 - schedule.alpha_bar(eta)).sqrt();
    let c_y = 1.0 / schedule.alpha(eta).sqrt();
    let sigma = beta.sqrt();
    y.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (y, e))| c_y * (y - c_eps * e) + z.map_or(0.0, |z| sigma * z[i]))
        .collect()
}

/// Deterministic jump `η → η_prev` through the implied clean sample.
pub fn ddim_step(y: &[f64], eta: usize, eta_prev: usize, eps_hat: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    debug_assert!(eta_prev < eta);
    let ab = schedule.alpha_bar(eta);
    let ab_prev = schedule.alpha_bar(eta_prev);
    let (s, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, snp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    y.iter()
        .zip(eps_hat)
        .map(|(y, e)| sp * ((y - sn * e) / s) + snp * e)
        .collect()
}

/// Mean squared error between the true and predicted noise.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    check_len(eps.len(), eps_hat.len())?;
    if eps.is_empty() {
        return Err(Error::Invalid("empty noise arrays".into()));
    }
    Ok(eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / eps.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 200);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(200) - 0.05).abs() < 1e-15);
        for eta in 1..=200 {
            let direct: f64 = (1..=eta).map(|k| 1.0 - (1e-4 + (0.05 - 1e-4) * (k - 1) as f64 / 199.0)).product();
            assert!((s.alpha_bar(eta) - direct).abs() < 1e-12);
            assert!(s.beta(eta) > s.beta(eta - 1));
            assert!(s.alpha_bar(eta) < s.alpha_bar(eta - 1) && s.alpha_bar(eta) > 0.0);
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.05).is_err());
        assert!(NoiseSchedule::linear(10, 0.05, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.05).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let s = NoiseSchedule::default();
        let y0 = [1.0, -2.0, 0.5];
        let out = forward_noise(&y0, 50, &[0.0; 3], &s).unwrap();
        for (o, y) in out.iter().zip(&y0) {
            assert!((o - s.alpha_bar(50).sqrt() * y).abs() < 1e-15);
        }
        let deep = NoiseSchedule::linear(1000, 1e-4, 0.5).unwrap();
        let eps = [0.3, -0.7, 1.1];
        let out = forward_noise(&y0, 1000, &eps, &deep).unwrap();
        for (o, e) in out.iter().zip(&eps) {
            assert!((o - e).abs() < 1e-6);
        }
        assert!(forward_noise(&y0, 1, &[0.0; 2], &s).is_err());
        assert!(forward_noise(&y0, 0, &[0.0; 3], &s).is_err());
        assert!(forward_noise(&y0, 201, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn two_single_steps_compose_to_closed_form() {
        // y1 = sqrt(a1) y0 + sqrt(1-a1) e1, y2 = sqrt(a2) y1 + sqrt(1-a2) e2
        // gives mean coefficient sqrt(a1 a2) and variance a2 (1-a1) + (1-a2).
        let s = NoiseSchedule::default();
        let (a1, a2) = (s.alpha(1), s.alpha(2));
        let mean = (a2 * a1).sqrt();
        let var = a2 * (1.0 - a1) + (1.0 - a2);
        assert!((mean - s.alpha_bar(2).sqrt()).abs() < 1e-12);
        assert!((var - (1.0 - s.alpha_bar(2))).abs() < 1e-12);
    }

    #[test]
    fn ddpm_step_matches_hand_evaluation() {
        let s = NoiseSchedule::default();
        let (y, e, z) = ([0.8, -1.2], [0.1, 0.4], [-0.5, 0.9]);
        let eta = 37;
        let (b, a, ab) = (s.beta(eta), s.alpha(eta), s.alpha_bar(eta));
        let out = ddpm_step(&y, eta, &e, Some(&z), &s);
        for i in 0..2 {
            let want = (y[i] - b / (1.0 - ab).sqrt() * e[i]) / a.sqrt() + b.sqrt() * z[i];
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_step_is_identity_in_the_no_noise_limit() {
        let s = NoiseSchedule::linear(1, 1e-14, 1e-14).unwrap();
        let out = ddpm_step(&[1.5, -2.0], 1, &[0.0, 0.0], None, &s);
        assert!((out[0] - 1.5).abs() < 1e-12 && (out[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_loss_examples() {
        let e = [0.1, -0.3, 2.0, 0.0];
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        let shifted: Vec<f64> = e.iter().map(|v| v + 1.0).collect();
        assert!((diffusion_loss(&e, &shifted).unwrap() - 1.0).abs() < 1e-15);
        let other = [0.5, 0.5, -1.0, 3.0];
        let mut direct = 0.0;
        for i in 0..4 {
            direct += (e[i] - other[i]).powi(2);
        }
        assert!((diffusion_loss(&e, &other).unwrap() - direct / 4.0).abs() < 1e-15);
        assert!(diffusion_loss(&e, &other[..3]).is_err());
    }

    proptest! {
        #[test]
        fn ddim_jump_to_zero_inverts_forward_noise(
            y0 in prop::collection::vec(-5.0..5.0f64, 24),
            eps in prop::collection::vec(-4.0..4.0f64, 24),
            eta in 1usize..=200,
        ) {
            let s = NoiseSchedule::default();
            let y = forward_noise(&y0, eta, &eps, &s).unwrap();
            let back = ddim_step(&y, eta, 0, &eps, &s);
            for (a, b) in back.iter().zip(&y0) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
