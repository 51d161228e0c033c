//! Streaming mean and variance accumulators.

use serde::{Deserialize, Serialize};

/// Incremental mean with min/max tracking.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    count: u64,
    mean: f64,
    min: f64,
    max: f64,
}

impl RunningMean {
    pub fn push(&mut self, value: f64) {
        self.count += 1;
        if self.count == 1 {
            self.mean = value;
            self.min = value;
            self.max = value;
        } else {
            self.mean += (value - self.mean) / self.count as f64;
            self.min = self.min.min(value);
            self.max = self.max.max(value);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }
}

/// Weighted Welford accumulator (West's update). With unit weights this is
/// the classic Welford recurrence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    weight: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn update(&mut self, value: f64, weight: f64) {
        if weight <= 0.0 {
            return;
        }
        self.weight += weight;
        let delta = value - self.mean;
        self.mean += delta * weight / self.weight;
        self.m2 += weight * delta * (value - self.mean);
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }

    pub fn push(&mut self, value: f64) {
        self.update(value, 1.0);
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Population variance (divide by total weight); 0 when empty.
    pub fn population_variance(&self) -> f64 {
        if self.weight > 0.0 {
            self.m2 / self.weight
        } else {
            0.0
        }
    }
}

/// Two-pass population variance.
pub fn batch_population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let values: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.013 + 5.0).collect();
        let mut w = Welford::default();
        values.iter().for_each(|v| w.push(*v));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((w.mean() - mean).abs() <= 1e-12 * mean.abs());
        let var = batch_population_variance(&values);
        assert!((w.population_variance() - var).abs() <= 1e-9 * var);
    }

    #[test]
    fn weights_act_as_repetition() {
        let mut weighted = Welford::default();
        let mut repeated = Welford::default();
        for (v, k) in [(1.0, 3.0), (4.0, 2.0), (2.5, 1.0)] {
            weighted.update(v, k);
            for _ in 0..k as usize {
                repeated.push(v);
            }
        }
        assert!((weighted.mean() - repeated.mean()).abs() < 1e-12);
        assert!((weighted.population_variance() - repeated.population_variance()).abs() < 1e-12);
        weighted.update(100.0, 0.0);
        assert_eq!(weighted.weight(), 6.0);
    }

    #[test]
    fn running_mean_tracks_extremes() {
        let mut m = RunningMean::default();
        for v in [3.0, -1.0, 7.0] {
            m.push(v);
        }
        assert_eq!((m.count(), m.min(), m.max()), (3, -1.0, 7.0));
        assert!((m.mean() - 3.0).abs() < 1e-15);
    }
}
