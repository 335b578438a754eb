use serde::Serialize;

/// Sample mean with its standard error.
///
/// Sums are shifted by the first observation, so a sample of identical
/// values has mean equal to that value and zero standard error exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let first = *values.first()?;
        let n = values.len() as f64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for &v in values {
            let d = v - first;
            s1 += d;
            s2 += d * d;
        }
        let mean_shift = s1 / n;
        let var = if values.len() > 1 {
            ((s2 - s1 * mean_shift) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Some(Self {
            mean: first + mean_shift,
            stderr: (var / n).sqrt(),
            count: values.len(),
        })
    }

    pub fn sample_variance(values: &[f64]) -> Option<f64> {
        if values.len() < 2 {
            return None;
        }
        let est = Self::from_values(values)?;
        let n = values.len() as f64;
        Some(est.stderr * est.stderr * n)
    }
}

/// Standard error of the sample variance, from the fourth central moment.
pub fn variance_stderr(values: &[f64]) -> Option<f64> {
    let est = MeanEstimate::from_values(values)?;
    let n = values.len() as f64;
    let m2 = values.iter().map(|v| (v - est.mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - est.mean).powi(4)).sum::<f64>() / n;
    Some(((m4 - m2 * m2) / n).max(0.0).sqrt())
}
