use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::hypoexp::{self, HypoexpDensity, Support};
use super::LawError;

/// Conditional law of the shift `beta` given the scaling atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ShiftLaw {
    PointMass {
        b: f64,
    },
    /// Density `exp(c - t)` on `(c, inf)`.
    ExponentialFrom {
        c: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// `c + sum_j eta_j / kappa_j` with independent standard exponentials.
    PointPlusHypoexp {
        c: f64,
        kappas: Vec<f64>,
    },
}

/// Estimate of `E ln max(|beta|, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogMoment {
    pub value: f64,
    pub finite: bool,
    pub method: LogMomentMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogMomentMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

impl ShiftLaw {
    pub(crate) fn validate(&self) -> Result<(), LawError> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(LawError::Invalid(format!("{what} must be finite")))
            }
        };
        match self {
            ShiftLaw::PointMass { b } => finite(*b, "point mass b"),
            ShiftLaw::ExponentialFrom { c } => finite(*c, "exponential origin c"),
            ShiftLaw::Uniform { lo, hi } => {
                finite(*lo, "uniform lo")?;
                finite(*hi, "uniform hi")?;
                if lo < hi {
                    Ok(())
                } else {
                    Err(LawError::Invalid(format!("uniform requires lo < hi, got [{lo}, {hi}]")))
                }
            }
            ShiftLaw::PointPlusHypoexp { c, kappas } => {
                finite(*c, "hypoexponential origin c")?;
                if kappas.is_empty() {
                    return Err(LawError::Invalid("kappas must be nonempty".into()));
                }
                if kappas.iter().any(|k| *k == 0.0 || !k.is_finite()) {
                    return Err(LawError::Invalid("every kappa must be finite and nonzero".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ShiftLaw::PointMass { b } => *b,
            ShiftLaw::ExponentialFrom { c } => {
                let e: f64 = Exp1.sample(rng);
                c + e
            }
            ShiftLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ShiftLaw::PointPlusHypoexp { c, kappas } => {
                let mut xi = 0.0;
                for k in kappas {
                    let e: f64 = Exp1.sample(rng);
                    xi += e / k;
                }
                c + xi
            }
        }
    }

    /// Deterministic value, if the law is a point mass.
    pub fn point(&self) -> Option<f64> {
        match self {
            ShiftLaw::PointMass { b } => Some(*b),
            _ => None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        !matches!(self, ShiftLaw::PointMass { .. })
    }

    /// Closed-form density; `None` for point masses and for more than two rates.
    pub fn density(&self, t: f64) -> Option<f64> {
        match self {
            ShiftLaw::PointMass { .. } => None,
            ShiftLaw::ExponentialFrom { c } => Some(if t > *c { (c - t).exp() } else { 0.0 }),
            ShiftLaw::Uniform { lo, hi } => Some(if t >= *lo && t <= *hi { 1.0 / (hi - lo) } else { 0.0 }),
            ShiftLaw::PointPlusHypoexp { c, kappas } => {
                (kappas.len() <= 2).then(|| hypoexp::closed_form(kappas, t - c))
            }
        }
    }

    /// Density evaluator for any continuous variant, numeric when needed.
    pub fn density_fn(&self) -> Option<Box<dyn Fn(f64) -> f64 + Send + Sync>> {
        match self {
            ShiftLaw::PointMass { .. } => None,
            ShiftLaw::PointPlusHypoexp { c, kappas } => {
                let d = HypoexpDensity::new(kappas);
                let c = *c;
                Some(Box::new(move |t| d.eval(t - c)))
            }
            other => {
                let law = other.clone();
                Some(Box::new(move |t| law.density(t).unwrap_or(0.0)))
            }
        }
    }

    /// Interval carrying all but `tail_tol` of the mass, and the point the
    /// density is singular at (jump or kink) if any.
    pub fn effective_support(&self, tail_tol: f64) -> (Support, f64) {
        match self {
            ShiftLaw::PointMass { b } => (Support { lo: *b, hi: *b }, *b),
            ShiftLaw::ExponentialFrom { c } => (
                Support {
                    lo: *c,
                    hi: c - tail_tol.ln(),
                },
                *c,
            ),
            ShiftLaw::Uniform { lo, hi } => (Support { lo: *lo, hi: *hi }, *lo),
            ShiftLaw::PointPlusHypoexp { c, kappas } => {
                let s = hypoexp::support(kappas, tail_tol);
                (
                    Support {
                        lo: c + s.lo,
                        hi: c + s.hi,
                    },
                    *c,
                )
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ShiftLaw::PointMass { b } => *b,
            ShiftLaw::ExponentialFrom { c } => c + 1.0,
            ShiftLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            ShiftLaw::PointPlusHypoexp { c, kappas } => c + hypoexp::mean(kappas),
        }
    }

    /// `E ln max(|beta|, 1)`; the hypoexponential case is estimated from
    /// `mc_samples` draws of `rng`.
    pub fn log_moment<R: Rng + ?Sized>(&self, rng: &mut R, mc_samples: usize) -> LogMoment {
        let (value, method) = match self {
            ShiftLaw::PointMass { b } => (log_plus(*b), LogMomentMethod::ClosedForm),
            ShiftLaw::Uniform { lo, hi } => (
                (log_plus_integral(*hi) - log_plus_integral(*lo)) / (hi - lo),
                LogMomentMethod::ClosedForm,
            ),
            ShiftLaw::ExponentialFrom { c } => (exponential_log_moment(*c), LogMomentMethod::Quadrature),
            ShiftLaw::PointPlusHypoexp { .. } => {
                let n = mc_samples.max(1);
                let s: f64 = (0..n).map(|_| log_plus(self.sample(rng))).sum();
                (s / n as f64, LogMomentMethod::MonteCarlo)
            }
        };
        // Every variant here has exponential or bounded tails.
        LogMoment {
            value,
            finite: value.is_finite(),
            method,
        }
    }
}

fn log_plus(t: f64) -> f64 {
    t.abs().max(1.0).ln()
}

/// `int_0^u ln max(|t|, 1) dt`, an odd function of `u`.
fn log_plus_integral(u: f64) -> f64 {
    let v = u.abs();
    let h = if v <= 1.0 { 0.0 } else { v * v.ln() - v + 1.0 };
    h.copysign(u)
}

/// `int_0^inf ln max(|c + s|, 1) e^{-s} ds` by composite Simpson between kinks.
fn exponential_log_moment(c: f64) -> f64 {
    let end = 80.0;
    let mut cuts = vec![0.0, end];
    for k in [1.0 - c, -1.0 - c] {
        if k > 0.0 && k < end {
            cuts.push(k);
        }
    }
    // Geometric cuts past the last kink keep panels short where ln bends.
    let base = cuts.iter().cloned().filter(|k| *k < end).fold(0.0, f64::max);
    let mut step = 0.25;
    while base + step < end {
        cuts.push(base + step);
        step *= 2.0;
    }
    cuts.sort_by(f64::total_cmp);
    let f = |s: f64| log_plus(c + s) * (-s).exp();
    cuts.windows(2)
        .map(|w| {
            let n = 4000;
            let h = (w[1] - w[0]) / n as f64;
            let mut acc = f(w[0]) + f(w[1]);
            for i in 1..n {
                let x = w[0] + i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            acc * h / 3.0
        })
        .sum()
}
