//! Coefficient laws for `y(x) = E{y(alpha (x - beta))}`.
//!
//! The scaling `alpha` is discrete: each atom carries a scaling value, its
//! probability, and the conditional law of the shift `beta`.

pub mod hypoexp;
mod shift;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;

pub use shift::{LogMoment, LogMomentMethod, ShiftLaw};

/// Probabilities must sum to one within this.
pub const PROBABILITY_TOL: f64 = 1e-12;
/// Default band around zero inside which `K` counts as critical.
pub const DEFAULT_TOL_K: f64 = 1e-9;
/// Relative tolerance for resonance constants to count as equal.
pub const RESONANCE_TOL: f64 = 1e-9;
/// Draws used to estimate the log-moment of hypoexponential shifts.
pub const LOG_MOMENT_SAMPLES: usize = 100_000;
const LOG_MOMENT_SEED: u64 = 0x1a2b_3c4d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("invalid law: {0}")]
    Invalid(String),
    #[error("P(alpha = 0) = {p_zero} > 0, so E ln|alpha| is undefined")]
    DegenerateZero { p_zero: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub a: f64,
    pub p: f64,
    pub shift: ShiftLaw,
}

/// Declares every scaling value to be `q^m` for an integer `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QLattice {
    pub q: f64,
    pub m: Vec<i64>,
}

/// Serialized form of a [`CoefficientLaw`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    pub atoms: Vec<Atom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lattice: Option<QLattice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LawSpec", into = "LawSpec")]
pub struct CoefficientLaw {
    atoms: Vec<Atom>,
    q_lattice: Option<QLattice>,
    cumulative: Vec<f64>,
}

/// One draw of `(alpha, beta)` together with the atom it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub atom: usize,
    pub a: f64,
    pub b: f64,
}

impl TryFrom<LawSpec> for CoefficientLaw {
    type Error = LawError;

    fn try_from(spec: LawSpec) -> Result<Self, LawError> {
        CoefficientLaw::new(spec.atoms, spec.q_lattice)
    }
}

impl From<CoefficientLaw> for LawSpec {
    fn from(law: CoefficientLaw) -> Self {
        LawSpec {
            atoms: law.atoms,
            q_lattice: law.q_lattice,
        }
    }
}

impl CoefficientLaw {
    pub fn new(atoms: Vec<Atom>, q_lattice: Option<QLattice>) -> Result<Self, LawError> {
        if atoms.is_empty() {
            return Err(LawError::Invalid("at least one atom is required".into()));
        }
        for (i, atom) in atoms.iter().enumerate() {
            if !atom.a.is_finite() {
                return Err(LawError::Invalid(format!("atom {i}: scaling must be finite")));
            }
            if !(atom.p > 0.0 && atom.p <= 1.0) {
                return Err(LawError::Invalid(format!(
                    "atom {i}: probability {} outside (0, 1]",
                    atom.p
                )));
            }
            atom.shift
                .validate()
                .map_err(|e| LawError::Invalid(format!("atom {i}: {e}")))?;
        }
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        if (total - 1.0).abs() > PROBABILITY_TOL {
            return Err(LawError::Invalid(format!("probabilities sum to {total}, not 1")));
        }
        if let Some(lat) = &q_lattice {
            if !(lat.q > 1.0 && lat.q.is_finite()) {
                return Err(LawError::Invalid(format!("lattice base q = {} must exceed 1", lat.q)));
            }
            if lat.m.len() != atoms.len() {
                return Err(LawError::Invalid(format!(
                    "lattice declares {} exponents for {} atoms",
                    lat.m.len(),
                    atoms.len()
                )));
            }
            for (i, (atom, &m)) in atoms.iter().zip(&lat.m).enumerate() {
                let expect = lat.q.powi(m as i32);
                if (atom.a - expect).abs() > 1e-12 * atom.a.abs() {
                    return Err(LawError::Invalid(format!(
                        "atom {i}: a = {} is not q^{m} = {expect}",
                        atom.a
                    )));
                }
            }
        }
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = atoms
            .iter()
            .map(|a| {
                acc += a.p;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = f64::INFINITY;
        Ok(Self {
            atoms,
            q_lattice,
            cumulative,
        })
    }

    /// Law with point-mass shifts from `(a, p, b)` triples.
    pub fn discrete(triples: &[(f64, f64, f64)]) -> Result<Self, LawError> {
        Self::new(
            triples
                .iter()
                .map(|&(a, p, b)| Atom {
                    a,
                    p,
                    shift: ShiftLaw::PointMass { b },
                })
                .collect(),
            None,
        )
    }

    pub fn with_q_lattice(self, q: f64, m: Vec<i64>) -> Result<Self, LawError> {
        Self::new(self.atoms, Some(QLattice { q, m }))
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn q_lattice(&self) -> Option<&QLattice> {
        self.q_lattice.as_ref()
    }

    /// Lattice exponent of an atom, when the law declares one.
    pub fn exponent(&self, atom: usize) -> Option<i64> {
        self.q_lattice.as_ref().map(|l| l.m[atom])
    }

    /// `|alpha| = 1` almost surely, compared exactly on stored values.
    pub fn is_unit_modulus(&self) -> bool {
        self.atoms.iter().all(|a| a.a.abs() == 1.0)
    }

    pub fn all_point_masses(&self) -> bool {
        self.atoms.iter().all(|a| !a.shift.is_continuous())
    }

    pub fn sample_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let u: f64 = rng.random();
        let atom = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.atoms.len() - 1);
        let chosen = &self.atoms[atom];
        Draw {
            atom,
            a: chosen.a,
            b: chosen.shift.sample(rng),
        }
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let d = self.sample_draw(rng);
        (d.a, d.b)
    }

    /// `K = E ln|alpha|`, exact for the discrete scaling law.
    pub fn log_scale_moment(&self) -> Result<f64, LawError> {
        let p_zero = self.p_zero();
        if p_zero > 0.0 {
            return Err(LawError::DegenerateZero { p_zero });
        }
        if let Some(lat) = &self.q_lattice {
            let drift: f64 = self.atoms.iter().zip(&lat.m).map(|(a, &m)| a.p * m as f64).sum();
            let scale: f64 = self.atoms.iter().zip(&lat.m).map(|(a, &m)| a.p * m.abs() as f64).sum();
            if drift.abs() <= PROBABILITY_TOL * scale.max(1.0) {
                return Ok(0.0);
            }
            return Ok(drift * lat.q.ln());
        }
        Ok(self.atoms.iter().map(|a| a.p * a.a.abs().ln()).sum())
    }

    fn p_zero(&self) -> f64 {
        self.atoms.iter().filter(|a| a.a == 0.0).fold(0.0, |s, a| s + a.p)
    }

    /// Zero mass, unit-modulus mass and resonance constant, if any.
    pub fn detect_degeneracies(&self) -> Degeneracies {
        let p_unit_modulus = self.atoms.iter().filter(|a| a.a.abs() == 1.0).fold(0.0, |s, a| s + a.p);
        Degeneracies {
            p_zero: self.p_zero(),
            p_unit_modulus,
            resonance: self.resonance(),
        }
    }

    /// The `c` with `alpha (c - beta) = c` for every atom, if one exists.
    fn resonance(&self) -> Option<f64> {
        let mut constraint: Option<f64> = None;
        for atom in &self.atoms {
            let b = atom.shift.point()?;
            if atom.a == 1.0 {
                if b != 0.0 {
                    return None;
                }
                continue;
            }
            // a (c - b) = c  <=>  c = a b / (a - 1); covers a = 0 (c = 0).
            let c = atom.a * b / (atom.a - 1.0);
            match constraint {
                None => constraint = Some(c),
                Some(prev) => {
                    if (prev - c).abs() > RESONANCE_TOL * (1.0 + prev.abs().max(c.abs())) {
                        return None;
                    }
                }
            }
        }
        // Only identity atoms: every point is fixed.
        Some(constraint.unwrap_or(0.0))
    }

    pub fn classify_regime(&self, tol_k: f64) -> RegimeReport {
        let deg = self.detect_degeneracies();
        let k = self.log_scale_moment().ok();
        let log_beta_moment = self.log_beta_moment();
        let regime = if deg.p_zero > 0.0 {
            Regime::DegenerateZero
        } else if deg.p_unit_modulus >= 1.0 - PROBABILITY_TOL {
            Regime::DegenerateUnitModulus
        } else if deg.resonance.is_some() {
            Regime::Resonant
        } else {
            let k = k.expect("K is defined when P(alpha = 0) = 0");
            if k.abs() <= tol_k {
                Regime::Critical
            } else if k < 0.0 {
                Regime::Subcritical
            } else {
                Regime::Supercritical
            }
        };
        RegimeReport {
            p_zero: deg.p_zero,
            p_unit_modulus: deg.p_unit_modulus,
            resonance: deg.resonance,
            k,
            log_beta_moment,
            regime,
        }
    }

    /// `E ln max(|beta|, 1)` over the mixture.
    pub fn log_beta_moment(&self) -> LogMoment {
        let mut rng = SeedStream::new(LOG_MOMENT_SEED).rng(0);
        let mut value = 0.0;
        let mut finite = true;
        let mut method = LogMomentMethod::ClosedForm;
        for atom in &self.atoms {
            let m = atom.shift.log_moment(&mut rng, LOG_MOMENT_SAMPLES);
            value += atom.p * m.value;
            finite &= m.finite;
            method = match (method, m.method) {
                (LogMomentMethod::MonteCarlo, _) | (_, LogMomentMethod::MonteCarlo) => LogMomentMethod::MonteCarlo,
                (LogMomentMethod::Quadrature, _) | (_, LogMomentMethod::Quadrature) => LogMomentMethod::Quadrature,
                _ => LogMomentMethod::ClosedForm,
            };
        }
        LogMoment { value, finite, method }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Degeneracies {
    pub p_zero: f64,
    pub p_unit_modulus: f64,
    pub resonance: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Regime {
    DegenerateZero,
    DegenerateUnitModulus,
    Resonant,
    Subcritical,
    Critical,
    Supercritical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeReport {
    pub p_zero: f64,
    pub p_unit_modulus: f64,
    pub resonance: Option<f64>,
    /// `E ln|alpha|`; absent when `alpha = 0` has positive mass.
    #[serde(rename = "K")]
    pub k: Option<f64>,
    pub log_beta_moment: LogMoment,
    pub regime: Regime,
}
