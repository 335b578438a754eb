//! The chain `X_n = alpha_n (X_{n-1} - beta_n)` and its hitting rules.
//!
//! Alongside `X_n` the state carries the iterates `A_n = alpha_1 ... alpha_n`
//! and `D_n = sum_k beta_k alpha_k ... alpha_n`, so that `X_n = A_n x_0 - D_n`.
//! Laws with a declared q-lattice or with `|alpha| = 1` also carry exact
//! integer bookkeeping, which is what `HitOne` and `LatticeReturn` test.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laws::{CoefficientLaw, Draw};
use crate::rng::{PathRng, SeedStream};
use crate::stats::MeanEstimate;

pub const DEFAULT_CAP: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoppingRule {
    /// `A_n = 0`.
    HitZero,
    /// `A_n = 1`, decided on the exact bookkeeping.
    HitOne,
    /// `A_n > 0`.
    HitPositive,
    /// `|A_n| <= e^{-m}`.
    SmallModulus { m: f64 },
    /// Lattice exponent back at zero.
    LatticeReturn,
    /// Fixed time `n`.
    Horizon { n: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainState {
    pub n: u64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "X")]
    pub x: f64,
    pub x0: f64,
    /// `S_n = m_1 + ... + m_n` for q-lattice laws.
    pub lattice_exp: Option<i64>,
    /// Sign of `A_n`, tracked when the bookkeeping is exact.
    pub sign_exact: Option<i8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopStatus {
    Stopped,
    CapExceeded { cap: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StoppedOutcome {
    pub state: ChainState,
    pub status: StopStatus,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("rule {rule:?} needs exact bookkeeping: {reason}")]
    RuleUnconstructible { rule: StoppingRule, reason: &'static str },
    #[error("all {n_paths} paths exceeded the cap of {cap} steps")]
    AllPathsCapped { n_paths: usize, cap: u64 },
    #[error("invalid rule parameter: {0}")]
    InvalidRule(String),
}

/// Mean of `y(X_tau)` over stopped paths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StoppedMean {
    pub estimate: f64,
    pub stderr: f64,
    pub cap_rate: f64,
    pub n_paths: usize,
    pub n_stopped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftSample {
    pub values: Vec<f64>,
    pub cap_rate: f64,
    /// Stopped paths whose `D_tau` overflowed.
    pub non_finite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauDistribution {
    /// `pmf[n]` is the fraction of all paths stopping at `n`; `pmf[0] = 0`.
    pub pmf: Vec<f64>,
    pub cap_rate: f64,
    pub n_paths: usize,
}

impl TauDistribution {
    pub fn at(&self, n: usize) -> f64 {
        self.pmf.get(n).copied().unwrap_or(0.0)
    }

    /// Binomial standard error of `pmf[n]`.
    pub fn stderr(&self, n: usize) -> f64 {
        let p = self.at(n);
        (p * (1.0 - p) / self.n_paths as f64).sqrt()
    }
}

impl ChainState {
    /// State at `n = 0` for the given law.
    pub fn start(law: &CoefficientLaw, x0: f64) -> Self {
        let exact = law.q_lattice().is_some() || law.is_unit_modulus();
        Self {
            n: 0,
            a: 1.0,
            d: 0.0,
            x: x0,
            x0,
            lattice_exp: law.q_lattice().map(|_| 0),
            sign_exact: exact.then_some(1),
        }
    }

    /// State at `n = 0` without exact bookkeeping.
    pub fn plain(x0: f64) -> Self {
        Self {
            n: 0,
            a: 1.0,
            d: 0.0,
            x: x0,
            x0,
            lattice_exp: None,
            sign_exact: None,
        }
    }

    /// One step with scaling `a`, shift `b` and lattice exponent `m`.
    pub fn step(&self, a: f64, b: f64, m: Option<i64>) -> Self {
        let next = Self {
            n: self.n + 1,
            a: a * self.a,
            d: a * (self.d + b),
            x: a * (self.x - b),
            x0: self.x0,
            lattice_exp: match (self.lattice_exp, m) {
                (Some(s), Some(m)) => Some(s + m),
                _ => None,
            },
            sign_exact: self.sign_exact.map(|s| s * sign_of(a)),
        };
        debug_assert!(next.identity_holds(), "X != A x0 - D at {next:?}");
        next
    }

    /// `X_n = A_n x_0 - D_n` to relative precision `1e-9`.
    pub fn identity_holds(&self) -> bool {
        let ax = self.a * self.x0;
        if !(ax.is_finite() && self.d.is_finite() && self.x.is_finite()) {
            return true;
        }
        (self.x - (ax - self.d)).abs() <= 1e-9 * (1.0 + ax.abs() + self.d.abs())
    }

    fn satisfies(&self, rule: &StoppingRule) -> bool {
        match rule {
            StoppingRule::HitZero => self.a == 0.0,
            StoppingRule::HitOne => self.sign_exact == Some(1) && self.lattice_exp.unwrap_or(0) == 0,
            StoppingRule::HitPositive => self.a > 0.0,
            StoppingRule::SmallModulus { m } => self.a.abs() <= (-m).exp(),
            StoppingRule::LatticeReturn => self.lattice_exp == Some(0),
            StoppingRule::Horizon { n } => self.n == *n,
        }
    }
}

fn sign_of(a: f64) -> i8 {
    if a > 0.0 {
        1
    } else if a < 0.0 {
        -1
    } else {
        0
    }
}

/// One step of the chain from `state` with the pair `(a, b)`.
pub fn chain_step(state: &ChainState, (a, b): (f64, f64)) -> ChainState {
    state.step(a, b, None)
}

fn step_draw(state: &ChainState, law: &CoefficientLaw, draw: Draw) -> ChainState {
    state.step(draw.a, draw.b, law.exponent(draw.atom))
}

impl StoppingRule {
    /// Rejects rules the law cannot decide exactly.
    pub fn check(&self, law: &CoefficientLaw) -> Result<(), ChainError> {
        match self {
            StoppingRule::HitOne if law.q_lattice().is_none() && !law.is_unit_modulus() => {
                Err(ChainError::RuleUnconstructible {
                    rule: *self,
                    reason: "A_n = 1 is decided only for q-lattice or unit-modulus laws",
                })
            }
            StoppingRule::LatticeReturn if law.q_lattice().is_none() => Err(ChainError::RuleUnconstructible {
                rule: *self,
                reason: "the law declares no q-lattice",
            }),
            StoppingRule::SmallModulus { m } if m.is_nan() || *m <= 0.0 => {
                Err(ChainError::InvalidRule(format!("SmallModulus needs m > 0, got {m}")))
            }
            StoppingRule::Horizon { n: 0 } => Err(ChainError::InvalidRule("Horizon needs n >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Runs one path from `x0` until the rule fires at some `n >= 1` or `cap` steps pass.
pub fn run_until(
    law: &CoefficientLaw,
    x0: f64,
    rule: &StoppingRule,
    cap: u64,
    rng: &mut PathRng,
) -> Result<StoppedOutcome, ChainError> {
    rule.check(law)?;
    Ok(run_checked(law, x0, rule, cap, rng))
}

fn run_checked(law: &CoefficientLaw, x0: f64, rule: &StoppingRule, cap: u64, rng: &mut PathRng) -> StoppedOutcome {
    let mut state = ChainState::start(law, x0);
    while state.n < cap {
        state = step_draw(&state, law, law.sample_draw(rng));
        if state.satisfies(rule) {
            return StoppedOutcome {
                state,
                status: StopStatus::Stopped,
            };
        }
    }
    StoppedOutcome {
        state,
        status: StopStatus::CapExceeded { cap },
    }
}

/// Runs `n_paths` independent paths, path `i` on stream `i` of `seeds`.
pub fn simulate_paths(
    law: &CoefficientLaw,
    x0: f64,
    rule: &StoppingRule,
    n_paths: usize,
    cap: u64,
    seeds: &SeedStream,
) -> Result<Vec<StoppedOutcome>, ChainError> {
    rule.check(law)?;
    Ok(seeds.par_map(n_paths, |_, rng| run_checked(law, x0, rule, cap, rng)))
}

fn cap_rate(outcomes: &[StoppedOutcome]) -> f64 {
    let capped = outcomes.iter().filter(|o| o.status != StopStatus::Stopped).count();
    capped as f64 / outcomes.len().max(1) as f64
}

/// Monte Carlo estimate of `E_x y(X_tau)`, capped paths excluded.
pub fn stopped_mean<F>(
    y: F,
    law: &CoefficientLaw,
    x: f64,
    rule: &StoppingRule,
    n_paths: usize,
    cap: u64,
    seeds: &SeedStream,
) -> Result<StoppedMean, ChainError>
where
    F: Fn(f64) -> f64 + Sync,
{
    let outcomes = simulate_paths(law, x, rule, n_paths, cap, seeds)?;
    let values: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.status == StopStatus::Stopped)
        .map(|o| y(o.state.x))
        .collect();
    let est = MeanEstimate::from_values(&values).ok_or(ChainError::AllPathsCapped { n_paths, cap })?;
    Ok(StoppedMean {
        estimate: est.mean,
        stderr: est.stderr,
        cap_rate: cap_rate(&outcomes),
        n_paths,
        n_stopped: values.len(),
    })
}

/// Samples of `D_tau` over stopped paths.
pub fn sample_stopped_shift(
    law: &CoefficientLaw,
    rule: &StoppingRule,
    n_paths: usize,
    cap: u64,
    seeds: &SeedStream,
) -> Result<ShiftSample, ChainError> {
    let outcomes = simulate_paths(law, 0.0, rule, n_paths, cap, seeds)?;
    let stopped: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.status == StopStatus::Stopped)
        .map(|o| o.state.d)
        .collect();
    if stopped.is_empty() {
        return Err(ChainError::AllPathsCapped { n_paths, cap });
    }
    let values: Vec<f64> = stopped.iter().copied().filter(|d| d.is_finite()).collect();
    Ok(ShiftSample {
        non_finite: stopped.len() - values.len(),
        values,
        cap_rate: cap_rate(&outcomes),
    })
}

/// Empirical law of the stopping index, normalized by all paths.
pub fn tau_distribution(
    law: &CoefficientLaw,
    rule: &StoppingRule,
    n_paths: usize,
    cap: u64,
    seeds: &SeedStream,
) -> Result<TauDistribution, ChainError> {
    let outcomes = simulate_paths(law, 0.0, rule, n_paths, cap, seeds)?;
    Ok(tau_histogram(&outcomes))
}

pub fn tau_histogram(outcomes: &[StoppedOutcome]) -> TauDistribution {
    let max_tau = outcomes
        .iter()
        .filter(|o| o.status == StopStatus::Stopped)
        .map(|o| o.state.n as usize)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; max_tau + 1];
    for o in outcomes.iter().filter(|o| o.status == StopStatus::Stopped) {
        counts[o.state.n as usize] += 1;
    }
    let total = outcomes.len().max(1) as f64;
    TauDistribution {
        pmf: counts.iter().map(|&c| c as f64 / total).collect(),
        cap_rate: cap_rate(outcomes),
        n_paths: outcomes.len(),
    }
}

/// CSV rows `path_id,tau,A_tau,D_tau,X_tau,status`.
pub fn paths_csv(outcomes: &[StoppedOutcome]) -> String {
    let mut out = String::from("path_id,tau,A_tau,D_tau,X_tau,status\n");
    for (i, o) in outcomes.iter().enumerate() {
        let status = match o.status {
            StopStatus::Stopped => "stopped",
            StopStatus::CapExceeded { .. } => "cap_exceeded",
        };
        let s = &o.state;
        writeln!(out, "{i},{},{:e},{:e},{:e},{status}", s.n, s.a, s.d, s.x).unwrap();
    }
    out
}
