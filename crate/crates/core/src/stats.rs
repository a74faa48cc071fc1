use serde::{Deserialize, Serialize};

/// Mean and standard error of the mean (sample standard deviation / sqrt(n)).
/// A single sample has SEM 0.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Running mean/variance over every value seen so far, merged batch-wise
/// (Chan et al. parallel update).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let batch_mean = xs.iter().sum::<f64>() / n;
        let batch_var = xs.iter().map(|x| (x - batch_mean).powi(2)).sum::<f64>() / n;
        let total = self.count + n;
        let delta = batch_mean - self.mean;
        let m2 = self.var * self.count + batch_var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / (self.var + 1e-8).sqrt()
    }
}
