use rand::Rng;
use rand_distr::StandardNormal;

/// Unit-step Ornstein-Uhlenbeck process around zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    x: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Self {
        Self {
            theta,
            sigma,
            x: vec![0.0; dim],
        }
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn value(&self) -> &[f64] {
        &self.x
    }

    pub fn set_value(&mut self, x: &[f64]) {
        self.x.copy_from_slice(x);
    }

    /// `x <- x - theta * x + sigma * xi`, returning the new state.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        for v in &mut self.x {
            let xi: f64 = rng.sample(StandardNormal);
            *v += -self.theta * *v + self.sigma * xi;
        }
        &self.x
    }

    /// Stationary standard deviation of the discrete process.
    pub fn stationary_std(&self) -> f64 {
        (self.sigma * self.sigma / (2.0 * self.theta - self.theta * self.theta)).sqrt()
    }
}

/// Exploration scale after `learner_episodes` completed learner episodes.
pub fn noise_scale(decay_base: f64, learner_episodes: u64) -> f64 {
    decay_base.powf(learner_episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut full = OuNoise::new(1, 1.0, 0.0);
        full.set_value(&[0.7]);
        assert_eq!(full.sample(&mut rng), &[0.0]);
        let mut frozen = OuNoise::new(2, 0.0, 0.0);
        frozen.set_value(&[0.3, -0.4]);
        for _ in 0..10 {
            assert_eq!(frozen.sample(&mut rng), &[0.3, -0.4]);
        }
    }

    #[test]
    fn scale_examples() {
        assert_eq!(noise_scale(0.998, 0), 1.0);
        assert!((noise_scale(0.998, 100) - 0.8186).abs() < 1e-4);
    }

    #[test]
    fn first_sample_after_reset_is_centered() {
        let n = 20_000;
        let mut sum = 0.0;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noise = OuNoise::new(1, 0.15, 0.2);
            noise.set_value(&[5.0]);
            noise.reset();
            sum += noise.sample(&mut rng)[0];
        }
        // standard error is 0.2 / sqrt(n)
        assert!((sum / n as f64).abs() < 4.0 * 0.2 / (n as f64).sqrt());
    }
}
