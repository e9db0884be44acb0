//! Running (weighted) average firing rates.
//!
//! With leak `λ` the weighted rate after `t` steps is
//! `Σ λ^{t-τ} s[τ] / Σ λ^{t-τ}`. It is tracked with a numerator vector and a
//! shared normalizer, so no spike history is stored. For `λ = 1` the
//! numerator is an exact integer spike count and the rate is the plain mean.

use ndarray::Array1;

#[derive(Clone, Debug)]
pub struct RateAccumulator {
    leak: f64,
    numerator: Vec<f64>,
    normalizer: f64,
    steps: usize,
}

impl RateAccumulator {
    pub fn new(n: usize, leak: f64) -> Self {
        Self {
            leak,
            numerator: vec![0.0; n],
            normalizer: 0.0,
            steps: 0,
        }
    }

    /// Open a new time step: decay the running sums.
    #[inline]
    pub fn begin_step(&mut self) {
        if self.leak != 1.0 {
            for v in &mut self.numerator {
                *v *= self.leak;
            }
            self.normalizer *= self.leak;
        }
        self.normalizer += 1.0;
        self.steps += 1;
    }

    /// Add a spike (or any signed value) for neuron `i` in the current step.
    #[inline]
    pub fn add(&mut self, i: usize, value: f64) {
        self.numerator[i] += value;
    }

    /// Push a whole dense step.
    pub fn push_dense(&mut self, values: &[f64]) {
        self.begin_step();
        for (acc, &v) in self.numerator.iter_mut().zip(values) {
            *acc += v;
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn rates(&self) -> Array1<f64> {
        if self.steps == 0 {
            return Array1::zeros(self.numerator.len());
        }
        self.numerator.iter().map(|&v| v / self.normalizer).collect()
    }
}

/// Weighted average rate of a recorded spike history.
pub fn lif_rates<S: AsRef<[f64]>>(history: &[S], n: usize, leak: f64) -> Array1<f64> {
    let mut acc = RateAccumulator::new(n, leak);
    for step in history {
        acc.push_dense(step.as_ref());
    }
    acc.rates()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_leak_is_plain_average() {
        let history = [[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        let r = lif_rates(&history, 2, 1.0);
        assert_eq!(r[0], 2.0 / 3.0);
        assert_eq!(r[1], 1.0 / 3.0);
    }

    #[test]
    fn constant_train_has_unit_rate() {
        let history = vec![[1.0]; 57];
        for leak in [1.0, 0.99, 0.5] {
            let r = lif_rates(&history, 1, leak);
            assert!((r[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_weighted_example() {
        let r = lif_rates(&[[1.0], [0.0]], 1, 0.5);
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_history_is_zero() {
        let r = lif_rates::<[f64; 1]>(&[], 1, 0.9);
        assert_eq!(r[0], 0.0);
    }
}
