//! Order-stable reductions and small Monte Carlo statistics helpers.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Sample mean and its standard error.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let mean = compensated_sum(samples.iter().copied()) / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(samples.iter().map(|v| (v - mean) * (v - mean))) / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Least-squares slope of `log y` against `log x`, with a 95% interval
/// half-width obtained by propagating the per-point standard errors.
pub fn loglog_slope(x: &[f64], y: &[f64], se: &[f64]) -> (f64, f64) {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let xbar = lx.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|v| (v - xbar) * (v - xbar)).sum();
    let weights: Vec<f64> = lx.iter().map(|v| (v - xbar) / sxx).collect();
    let slope = weights.iter().zip(&ly).map(|(w, v)| w * v).sum();
    let var: f64 = weights
        .iter()
        .zip(se.iter().zip(y))
        .map(|(w, (s, v))| (w * s / v).powi(2))
        .sum();
    (slope, 1.96 * var.sqrt())
}
