use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        // At T = 200 an end value of 0.02 leaves ᾱ_T ≈ 0.13; 0.04 brings it below 0.05.
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidConfig(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} .. {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0f64, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Checks the endpoint conditions expected of a usable schedule:
    /// ᾱ starts above 0.99 and ends below 0.05.
    pub fn check_endpoints(&self) -> Result<()> {
        let first = self.alpha_bar[0];
        let last = *self.alpha_bar.last().expect("T >= 2");
        if first > 0.99 && last < 0.05 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "schedule endpoints alpha_bar[0] = {first}, alpha_bar[T-1] = {last} outside (0.99, 1) / (0, 0.05)"
            )))
        }
    }
}

/// `sqrt(ᾱ)·z_y + sqrt(1 − ᾱ)·eps` for an explicit ᾱ.
pub fn noise_with_alpha_bar(z_y: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_y.iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect()
}

pub fn forward_noise(z_y: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    if t >= schedule.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    if z_y.len() != eps.len() {
        return Err(Error::Shape {
            op: "forward_noise",
            detail: format!("z_y has {} values, eps {}", z_y.len(), eps.len()),
        });
    }
    Ok(noise_with_alpha_bar(z_y, eps, schedule.alpha_bar[t]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_alpha_bar_is_one_minus_beta_start() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_equals_direct_product() {
        let s = NoiseSchedule::from_params(&ScheduleParams::default()).unwrap();
        for t in 0..s.steps() {
            let mut p = 1.0f64;
            for b in &s.beta()[..=t] {
                p *= 1.0 - b;
            }
            assert!((s.alpha_bar()[t] - p).abs() <= 1e-15, "t = {t}");
        }
    }

    #[test]
    fn default_schedule_is_monotone_with_valid_endpoints() {
        let s = NoiseSchedule::from_params(&ScheduleParams::default()).unwrap();
        s.check_endpoints().unwrap();
        assert!(s.beta().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.beta().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn short_schedule_endpoints_are_reported() {
        let s = make_schedule(200, 1e-4, 0.02).unwrap();
        assert!(s.check_endpoints().is_err());
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(make_schedule(200, 0.02, 1e-4).is_err());
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn noising_limits() {
        let z = [0.25f32, -0.5, 1.0];
        let e = [1.5f32, 0.1, -2.0];
        assert_eq!(noise_with_alpha_bar(&z, &e, 1.0), z);
        assert_eq!(noise_with_alpha_bar(&z, &e, 0.0), e);
        let s = NoiseSchedule::from_params(&ScheduleParams::default()).unwrap();
        assert!(matches!(
            forward_noise(&z, 200, &e, &s),
            Err(Error::TimestepOutOfRange { t: 200, steps: 200 })
        ));
    }
}
