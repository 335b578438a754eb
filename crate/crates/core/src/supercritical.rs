//! Positive supercritical laws: the perpetuity
//! `Upsilon = sum_{n>=1} beta_n prod_{j<n} alpha_j^{-1}` and its CDF, which
//! solves the equation, plus the escape-probability estimator that
//! approximates the same CDF from the forward chain.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::chain::{self, ChainError, StopStatus, StoppingRule};
use crate::laws::{CoefficientLaw, Regime, RegimeReport, DEFAULT_TOL_K};
use crate::rng::SeedStream;
use crate::stats::MeanEstimate;

pub const DEFAULT_EPS_TAIL: f64 = 1e-12;
pub const DEFAULT_TERM_CAP: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupercriticalError {
    #[error("law is {:?}, not supercritical", .0.regime)]
    NotSupercritical(Box<RegimeReport>),
    #[error("every scaling value must be positive; atom {atom} has a = {a}")]
    RequiresPositiveAlpha { atom: usize, a: f64 },
    #[error("prefactor still {prefactor:e} after {cap} terms")]
    CapExceeded { cap: u64, prefactor: f64 },
    #[error("empty sample")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFiniteSample,
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// One truncated draw of `Upsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UpsilonDraw {
    pub value: f64,
    /// Number of terms summed.
    pub terms: u64,
    /// Prefactor of the first omitted term.
    pub prefactor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpsilonSample {
    pub values: Vec<f64>,
    pub max_terms: u64,
    pub max_prefactor: f64,
}

/// Sampler for `Upsilon`, built only for positive supercritical laws.
#[derive(Clone, Debug)]
pub struct UpsilonSampler<'a> {
    law: &'a CoefficientLaw,
    eps_tail: f64,
    cap: u64,
}

impl<'a> UpsilonSampler<'a> {
    pub fn new(law: &'a CoefficientLaw, eps_tail: f64, cap: u64) -> Result<Self, SupercriticalError> {
        require_positive_supercritical(law)?;
        Ok(Self { law, eps_tail, cap })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<UpsilonDraw, SupercriticalError> {
        let mut value = 0.0;
        let mut prefactor = 1.0;
        let mut terms = 0;
        while prefactor >= self.eps_tail {
            if terms == self.cap {
                return Err(SupercriticalError::CapExceeded {
                    cap: self.cap,
                    prefactor,
                });
            }
            let (a, b) = self.law.sample_pair(rng);
            value += b * prefactor;
            prefactor /= a;
            terms += 1;
        }
        Ok(UpsilonDraw {
            value,
            terms,
            prefactor,
        })
    }

    /// `n` draws in parallel, one stream per draw.
    pub fn sample_many(&self, n: usize, seeds: &SeedStream) -> Result<UpsilonSample, SupercriticalError> {
        let draws = seeds.par_map(n, |_, rng| self.sample(rng));
        let mut out = UpsilonSample {
            values: Vec::with_capacity(n),
            max_terms: 0,
            max_prefactor: 0.0,
        };
        for d in draws {
            let d = d?;
            out.values.push(d.value);
            out.max_terms = out.max_terms.max(d.terms);
            out.max_prefactor = out.max_prefactor.max(d.prefactor);
        }
        Ok(out)
    }
}

pub fn require_positive_supercritical(law: &CoefficientLaw) -> Result<RegimeReport, SupercriticalError> {
    let report = law.classify_regime(DEFAULT_TOL_K);
    if report.regime != Regime::Supercritical {
        return Err(SupercriticalError::NotSupercritical(Box::new(report)));
    }
    if let Some((atom, a)) = law.atoms().iter().enumerate().find(|(_, a)| a.a <= 0.0) {
        return Err(SupercriticalError::RequiresPositiveAlpha { atom, a: a.a });
    }
    Ok(report)
}

/// One draw of `Upsilon`, validating the law first.
pub fn sample_upsilon<R: Rng + ?Sized>(
    law: &CoefficientLaw,
    eps_tail: f64,
    cap: u64,
    rng: &mut R,
) -> Result<UpsilonDraw, SupercriticalError> {
    UpsilonSampler::new(law, eps_tail, cap)?.sample(rng)
}

/// Right-continuous empirical distribution function.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalCdf {
    samples: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Result<Self, SupercriticalError> {
        if samples.is_empty() {
            return Err(SupercriticalError::EmptySample);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(SupercriticalError::NonFiniteSample);
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// `#{samples <= x} / N`.
    pub fn eval(&self, x: f64) -> f64 {
        self.samples.partition_point(|s| *s <= x) as f64 / self.len() as f64
    }

    /// `sup_x |F_N(x) - F(x)|` against a continuous reference CDF.
    pub fn ks_distance(&self, reference: impl Fn(f64) -> f64) -> f64 {
        let n = self.len() as f64;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let f = reference(s);
                ((i + 1) as f64 / n - f).max(f - i as f64 / n)
            })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `x,F` at the sorted samples.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("x,F\n");
        let n = self.len() as f64;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{s},{}", (i + 1) as f64 / n).unwrap();
        }
        out
    }
}

pub fn build_cdf(samples: Vec<f64>) -> Result<EmpiricalCdf, SupercriticalError> {
    EmpiricalCdf::new(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeResidual {
    pub probe: f64,
    pub f: f64,
    pub averaged: f64,
    pub residual: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub probes: Vec<ProbeResidual>,
    pub max_residual: f64,
    /// Some probe's residual exceeds five combined standard errors.
    pub flagged: bool,
}

/// Compares `F(x)` with a fresh Monte Carlo average of `F(alpha (x - beta))`.
pub fn verify_solution(
    f: &EmpiricalCdf,
    law: &CoefficientLaw,
    probes: &[f64],
    n_mc: usize,
    seeds: &SeedStream,
) -> Result<VerificationReport, SupercriticalError> {
    require_positive_supercritical(law)?;
    let n_cdf = f.len() as f64;
    let rows: Vec<ProbeResidual> = probes
        .par_iter()
        .enumerate()
        .map(|(k, &x)| {
            let mut rng = seeds.rng(k as u64);
            let images: Vec<f64> = (0..n_mc)
                .map(|_| {
                    let (a, b) = law.sample_pair(&mut rng);
                    f.eval(a * (x - b))
                })
                .collect();
            let est = MeanEstimate::from_values(&images).expect("n_mc > 0");
            let fx = f.eval(x);
            ProbeResidual {
                probe: x,
                f: fx,
                averaged: est.mean,
                residual: (fx - est.mean).abs(),
                stderr: (fx * (1.0 - fx) / n_cdf + est.stderr * est.stderr).sqrt(),
            }
        })
        .collect();
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let flagged = rows.iter().any(|r| r.residual > 5.0 * r.stderr);
    Ok(VerificationReport {
        probes: rows,
        max_residual,
        flagged,
    })
}

/// Smallest `n` with `e^{nK} > 10^6`.
pub fn default_horizon(k: f64) -> u64 {
    (1e6f64.ln() / k).floor() as u64 + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EscapeEstimate {
    pub x: f64,
    pub b: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub horizon: u64,
    /// Fixed-horizon stand-in for the infinite-time event.
    pub finite_horizon_proxy: bool,
}

/// Fraction of paths from `x` with `X_horizon > b`.
pub fn estimate_escape_probability(
    law: &CoefficientLaw,
    x: f64,
    b: f64,
    horizon: Option<u64>,
    n_paths: usize,
    seeds: &SeedStream,
) -> Result<EscapeEstimate, SupercriticalError> {
    let report = require_positive_supercritical(law)?;
    let horizon = horizon.unwrap_or_else(|| default_horizon(report.k.expect("K is defined")));
    let rule = StoppingRule::Horizon { n: horizon };
    let outcomes = chain::simulate_paths(law, x, &rule, n_paths, horizon, seeds)?;
    debug_assert!(outcomes.iter().all(|o| o.status == StopStatus::Stopped));
    let hits: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(o.state.x > b))).collect();
    let est = MeanEstimate::from_values(&hits).ok_or(SupercriticalError::EmptySample)?;
    Ok(EscapeEstimate {
        x,
        b,
        estimate: est.mean,
        stderr: est.stderr,
        horizon,
        finite_horizon_proxy: true,
    })
}
