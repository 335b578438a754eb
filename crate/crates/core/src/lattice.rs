//! Lattice structure of shifts.
//!
//! Two analyses live here. For `|alpha| = 1` the solutions are decided by
//! whether the shifts given `alpha = 1` span a lattice `lambda Z` and whether
//! the shifts given `alpha = -1` sit on a single coset of it. For q-lattice
//! laws with zero drift, the return shift of the exponent walk is shown to
//! be non-arithmetic through the sequence `theta_n` of its support points.

use serde::Serialize;
use thiserror::Error;

use crate::chain::{self, ChainError, StoppingRule};
use crate::laws::{CoefficientLaw, ShiftLaw, PROBABILITY_TOL, RESONANCE_TOL};
use crate::rng::SeedStream;

pub const DEFAULT_SPAN_TOL: f64 = 1e-9;
pub const MAX_EUCLID_ROUNDS: usize = 64;
pub const DEFAULT_K_BOUND: u32 = 12;
pub const DEFAULT_WITNESS_EPS: f64 = 1e-3;
pub const DEFAULT_RETURN_CAP: u64 = 10_000;
/// Brute-force searches larger than this fall back to the two-atom witness.
const MAX_K_SEARCH: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("needs |alpha| = 1 almost surely; P(|alpha| = 1) = {0}")]
    NotUnitModulus(f64),
    #[error("alpha = 1 almost surely; the plain Choquet-Deny case")]
    IdentityScaling,
    #[error("law declares no q-lattice")]
    NoLattice,
    #[error("atom {0} has a continuous shift; the q-lattice analysis needs point masses")]
    NonPointShift(usize),
    #[error("atom {0} is (1, 0), which carries no information")]
    TrivialAtom(usize),
    #[error("drift sum p_i m_i = {0} is not zero")]
    NotCritical(f64),
    #[error("no pair with m_i > 0 > m_j and distinct finite rho")]
    NoSeparatingPair,
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpanReport {
    pub arithmetic: bool,
    pub lambda: Option<f64>,
    pub degenerate: bool,
    pub tol: f64,
}

/// Tolerant Euclid on two nonnegative reals; `None` when the pair has no
/// common span above `tol` within the round limit. Near-multiples are
/// judged relative to the larger operand.
fn pair_gcd(a: f64, b: f64, tol: f64) -> Option<f64> {
    let (mut a, mut b) = (a.max(b), a.min(b));
    // Remainders inherit rounding proportional to the starting operands.
    let slack = tol * a.max(1.0);
    for _ in 0..MAX_EUCLID_ROUNDS {
        if b <= tol {
            return (a > tol).then_some(a);
        }
        let mut r = a - b * (a / b).floor();
        if r <= slack || b - r <= slack {
            r = 0.0;
        }
        a = b;
        b = r;
    }
    None
}

/// Largest `lambda` with every value in `lambda Z` up to `tol`.
///
/// Spans below `sqrt(tol)` are reported as non-arithmetic: at that scale the
/// remainders are dominated by rounding and the answer carries no meaning.
pub fn real_gcd_span(values: &[f64], tol: f64) -> SpanReport {
    let mut report = SpanReport {
        arithmetic: false,
        lambda: None,
        degenerate: false,
        tol,
    };
    let nonzero: Vec<f64> = values.iter().map(|v| v.abs()).filter(|v| *v > tol).collect();
    if nonzero.is_empty() {
        report.degenerate = true;
        return report;
    }
    let mut g = nonzero[0];
    for &v in &nonzero[1..] {
        match pair_gcd(g, v, tol) {
            Some(next) => g = next,
            None => return report,
        }
    }
    if g < tol.sqrt() {
        return report;
    }
    // Euclid amplifies rounding by the quotients; refit g to the integer multiples.
    let (num, den) = nonzero.iter().fold((0.0, 0.0), |(n, d), v| {
        let k = (v / g).round();
        (n + k * v, d + k * k)
    });
    let g = num / den;
    let on_lattice = values.iter().all(|v| {
        let k = (v / g).round();
        (v - k * g).abs() <= tol * (1.0 + k.abs())
    });
    if on_lattice {
        report.arithmetic = true;
        report.lambda = Some(g);
    }
    report
}

/// `values[0] mod lambda` when every value lies on that coset of `lambda Z`.
pub fn coset_offset(values: &[f64], lambda: f64, tol: f64) -> Option<f64> {
    let first = *values.first()?;
    let mut l0 = first.rem_euclid(lambda);
    if lambda - l0 <= tol {
        l0 = 0.0;
    }
    values
        .iter()
        .all(|v| {
            let k = ((v - l0) / lambda).round();
            (v - l0 - k * lambda).abs() <= tol * (1.0 + k.abs())
        })
        .then_some(l0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum UnitModulusCase {
    /// Shifts given `alpha = 1` are non-arithmetic: constants only.
    #[serde(rename = "a")]
    A,
    /// Arithmetic, but the reflected shifts leave every coset: constants only.
    #[serde(rename = "b-i")]
    BI,
    /// Arithmetic with reflected shifts on one coset: periodic symmetric solutions.
    #[serde(rename = "b-ii")]
    BII,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnitModulusReport {
    pub case: UnitModulusCase,
    pub p_one: f64,
    pub lambda: Option<f64>,
    pub lambda0: Option<f64>,
    /// Symmetry point `lambda0 / (2 lambda)` of the periodic profile.
    pub x0: Option<f64>,
    /// `lambda` was taken from differences of the reflected shifts because
    /// the shifts given `alpha = 1` are all zero.
    pub lambda_from_reflected: bool,
    pub tol: f64,
}

/// Case analysis for laws with `|alpha| = 1` and `P(alpha = 1) < 1`.
pub fn classify_unit_modulus(law: &CoefficientLaw, tol: f64) -> Result<UnitModulusReport, LatticeError> {
    let deg = law.detect_degeneracies();
    if deg.p_unit_modulus < 1.0 - PROBABILITY_TOL {
        return Err(LatticeError::NotUnitModulus(deg.p_unit_modulus));
    }
    let plus: Vec<&ShiftLaw> = law.atoms().iter().filter(|a| a.a == 1.0).map(|a| &a.shift).collect();
    let minus: Vec<&ShiftLaw> = law.atoms().iter().filter(|a| a.a == -1.0).map(|a| &a.shift).collect();
    if minus.is_empty() {
        return Err(LatticeError::IdentityScaling);
    }
    let p_one: f64 = law.atoms().iter().filter(|a| a.a == 1.0).fold(0.0, |s, a| s + a.p);
    let mut report = UnitModulusReport {
        case: UnitModulusCase::A,
        p_one,
        lambda: None,
        lambda0: None,
        x0: None,
        lambda_from_reflected: false,
        tol,
    };
    let points = |shifts: &[&ShiftLaw]| -> Option<Vec<f64>> { shifts.iter().map(|s| s.point()).collect() };
    let Some(plus_points) = points(&plus) else {
        return Ok(report);
    };
    let minus_points = points(&minus);
    let span = real_gcd_span(&plus_points, tol);
    let lambda = if span.degenerate || plus_points.is_empty() {
        // Every lattice contains zero; take lambda from the reflected shifts.
        report.lambda_from_reflected = true;
        let Some(mp) = &minus_points else {
            report.case = UnitModulusCase::BI;
            return Ok(report);
        };
        let diffs: Vec<f64> = mp.iter().map(|b| b - mp[0]).collect();
        let dspan = real_gcd_span(&diffs, tol);
        if dspan.degenerate {
            // A single reflected point: symmetric about it, no period forced.
            report.case = UnitModulusCase::BII;
            report.lambda0 = Some(mp[0]);
            return Ok(report);
        }
        match dspan.lambda {
            Some(l) => l,
            None => {
                report.case = UnitModulusCase::BI;
                return Ok(report);
            }
        }
    } else {
        match span.lambda {
            Some(l) => l,
            None => return Ok(report),
        }
    };
    report.lambda = Some(lambda);
    let offset = minus_points.and_then(|mp| coset_offset(&mp, lambda, tol));
    match offset {
        Some(l0) => {
            report.case = UnitModulusCase::BII;
            report.lambda0 = Some(l0);
            report.x0 = Some(0.5 * l0 / lambda);
        }
        None => report.case = UnitModulusCase::BI,
    }
    Ok(report)
}

/// `y(x) = g(x / lambda)` with `g(u) = g0(u - x0) + g0(x0 - u)`.
#[derive(Clone, Debug)]
pub struct SymmetricSolution<G> {
    g0: G,
    lambda: f64,
    x0: f64,
}

impl<G: Fn(f64) -> f64> SymmetricSolution<G> {
    pub fn eval(&self, x: f64) -> f64 {
        let u = x / self.lambda;
        (self.g0)(u - self.x0) + (self.g0)(self.x0 - u)
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
}

pub fn build_symmetric_solution<G: Fn(f64) -> f64>(g0: G, lambda: f64, lambda0: f64) -> SymmetricSolution<G> {
    assert!(lambda > 0.0, "lambda must be positive");
    SymmetricSolution {
        g0,
        lambda,
        x0: 0.5 * lambda0 / lambda,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QLatticeReport {
    pub critical: bool,
    /// `sum_i p_i m_i`.
    pub drift: f64,
    /// `b_i / (1 - a_i^{-1})`; `null` marks the infinite value of an `a_i = 1` atom.
    pub rho: Vec<Option<f64>>,
    pub resonant: Option<f64>,
    /// Original indices of the separating pair, `m > 0` first.
    pub pair: Option<(usize, usize)>,
    /// Witness with `k . m = 0`, in original atom order.
    pub k: Vec<u32>,
    /// Original indices of the atoms with `k > 0`, in relabelled order.
    pub order: Vec<usize>,
    /// Partial sums `s_i` over the relabelled atoms, `i < l`.
    pub s: Vec<i64>,
    /// `theta_1 .. theta_N` from the product formula.
    pub theta: Vec<f64>,
    /// The same values from the telescoped closed form.
    pub theta_telescoped: Vec<f64>,
    pub max_theta_disagreement: f64,
    /// `rho_1 - rho_l` after relabelling.
    pub theta_limit: Option<f64>,
    /// `sum |rho_{i+1} - rho_i| q^{-N min s}`, bounding `|theta_N - limit|`.
    pub rate_bound: Option<f64>,
    /// `n != n'` with `0 < |theta_n - theta_n'| < eps`.
    pub witness: Option<(usize, usize)>,
    pub witness_eps: f64,
    pub empirical_span: Option<SpanReport>,
    pub empirical_cap_rate: Option<f64>,
    pub empirical_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QLatticeSettings {
    pub n_theta: usize,
    pub n_paths: usize,
    pub cap: u64,
    pub k_bound: u32,
    pub witness_eps: f64,
    pub span_tol: f64,
}

impl Default for QLatticeSettings {
    fn default() -> Self {
        Self {
            n_theta: 50,
            n_paths: 10_000,
            cap: DEFAULT_RETURN_CAP,
            k_bound: DEFAULT_K_BOUND,
            witness_eps: DEFAULT_WITNESS_EPS,
            span_tol: DEFAULT_SPAN_TOL,
        }
    }
}

/// `rho_i = b_i / (1 - a_i^{-1})`, `None` for `a_i = 1`.
pub fn rho(a: f64, b: f64) -> Option<f64> {
    // `+ 0.0` turns a negative zero into zero.
    (a != 1.0).then(|| b / (1.0 - 1.0 / a) + 0.0)
}

/// Smallest `k` (by total, then lexicographically) with `k . m = 0`,
/// `k_{i*}, k_{j*} >= 1`, `k = 0` where `m = 0`, and every entry `<= bound`.
pub fn find_k(m: &[i64], pair: (usize, usize), bound: u32) -> Vec<u32> {
    let free: Vec<usize> = (0..m.len()).filter(|&i| m[i] != 0).collect();
    let fallback = || {
        let (i, j) = pair;
        let g = gcd(m[i].unsigned_abs(), m[j].unsigned_abs());
        let mut k = vec![0u32; m.len()];
        k[i] = (m[j].unsigned_abs() / g) as u32;
        k[j] = (m[i].unsigned_abs() / g) as u32;
        k
    };
    if (bound as f64 + 1.0).powi(free.len() as i32) > MAX_K_SEARCH {
        return fallback();
    }
    let mut best: Option<(u32, Vec<u32>)> = None;
    let mut k = vec![0u32; m.len()];
    // Odometer over the free coordinates.
    loop {
        let dot: i64 = free.iter().map(|&i| k[i] as i64 * m[i]).sum();
        if dot == 0 && k[pair.0] >= 1 && k[pair.1] >= 1 {
            let total: u32 = k.iter().sum();
            let better = match &best {
                None => true,
                Some((t, v)) => total < *t || (total == *t && k < *v),
            };
            if better {
                best = Some((total, k.clone()));
            }
        }
        let mut pos = 0;
        loop {
            if pos == free.len() {
                return best.map(|(_, v)| v).unwrap_or_else(fallback);
            }
            let i = free[pos];
            if k[i] < bound {
                k[i] += 1;
                break;
            }
            k[i] = 0;
            pos += 1;
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `theta_n` from the product formula, with products taken in log space so
/// large exponents cannot overflow.
pub fn theta_direct(a: &[f64], k: &[u32], rho: &[f64], n: usize) -> f64 {
    let mut log_prefix = 0.0f64;
    let mut total = 0.0;
    for i in 0..a.len() {
        let before = (-log_prefix).exp();
        log_prefix += n as f64 * k[i] as f64 * a[i].ln();
        let after = (-log_prefix).exp();
        total += rho[i] * (before - after);
    }
    total
}

/// `rho_1 + sum_{i<l} (rho_{i+1} - rho_i) q^{-n s_i} - rho_l`.
pub fn theta_telescoped(q: f64, s: &[i64], rho: &[f64], n: usize) -> f64 {
    let l = rho.len();
    let mut total = rho[0] - rho[l - 1];
    for i in 0..l - 1 {
        total += (rho[i + 1] - rho[i]) * q.powf(-(n as f64) * s[i] as f64);
    }
    total
}

/// Full analysis of a q-lattice law with point-mass shifts.
pub fn q_lattice_report(
    law: &CoefficientLaw,
    settings: &QLatticeSettings,
    seeds: &SeedStream,
) -> Result<QLatticeReport, LatticeError> {
    let lat = law.q_lattice().ok_or(LatticeError::NoLattice)?;
    let atoms = law.atoms();
    let mut b = Vec::with_capacity(atoms.len());
    for (i, atom) in atoms.iter().enumerate() {
        let bi = atom.shift.point().ok_or(LatticeError::NonPointShift(i))?;
        if atom.a == 1.0 && bi == 0.0 {
            return Err(LatticeError::TrivialAtom(i));
        }
        b.push(bi);
    }
    let m = &lat.m;
    let drift: f64 = atoms.iter().zip(m).map(|(a, &mi)| a.p * mi as f64).sum();
    let scale: f64 = atoms.iter().zip(m).map(|(a, &mi)| a.p * mi.unsigned_abs() as f64).sum();
    let critical = drift.abs() <= PROBABILITY_TOL * scale.max(1.0);
    if !critical {
        return Err(LatticeError::NotCritical(drift));
    }
    let rhos: Vec<Option<f64>> = atoms.iter().zip(&b).map(|(a, &bi)| rho(a.a, bi)).collect();
    let mut report = QLatticeReport {
        critical,
        drift,
        rho: rhos.clone(),
        resonant: law.detect_degeneracies().resonance,
        pair: None,
        k: Vec::new(),
        order: Vec::new(),
        s: Vec::new(),
        theta: Vec::new(),
        theta_telescoped: Vec::new(),
        max_theta_disagreement: 0.0,
        theta_limit: None,
        rate_bound: None,
        witness: None,
        witness_eps: settings.witness_eps,
        empirical_span: None,
        empirical_cap_rate: None,
        empirical_samples: 0,
    };
    if report.resonant.is_some() {
        return Ok(report);
    }
    let same = |x: f64, y: f64| (x - y).abs() <= RESONANCE_TOL * (1.0 + x.abs().max(y.abs()));
    let pair = (0..atoms.len())
        .filter(|&i| m[i] > 0 && rhos[i].is_some())
        .flat_map(|i| (0..atoms.len()).map(move |j| (i, j)))
        .find(|&(i, j)| m[j] < 0 && matches!((rhos[i], rhos[j]), (Some(x), Some(y)) if !same(x, y)))
        .ok_or(LatticeError::NoSeparatingPair)?;
    report.pair = Some(pair);
    let k = find_k(m, pair, settings.k_bound);

    let mut middle: Vec<usize> = (0..atoms.len())
        .filter(|&i| k[i] > 0 && i != pair.0 && i != pair.1)
        .collect();
    middle.sort_by(|&x, &y| m[y].cmp(&m[x]).then(x.cmp(&y)));
    let mut order = vec![pair.0];
    order.extend(middle);
    order.push(pair.1);

    let a_rel: Vec<f64> = order.iter().map(|&i| atoms[i].a).collect();
    let k_rel: Vec<u32> = order.iter().map(|&i| k[i]).collect();
    // Atoms with k > 0 and m != 0 have finite rho.
    let rho_rel: Vec<f64> = order.iter().map(|&i| rhos[i].expect("finite rho")).collect();
    let mut s = Vec::with_capacity(order.len() - 1);
    let mut acc = 0i64;
    for &i in &order[..order.len() - 1] {
        acc += k[i] as i64 * m[i];
        s.push(acc);
    }
    debug_assert!(s.iter().all(|v| *v > 0));

    for n in 1..=settings.n_theta {
        let d = theta_direct(&a_rel, &k_rel, &rho_rel, n);
        let t = theta_telescoped(lat.q, &s, &rho_rel, n);
        report.max_theta_disagreement = report.max_theta_disagreement.max((d - t).abs() / (1.0 + t.abs()));
        report.theta.push(d);
        report.theta_telescoped.push(t);
    }
    let limit = rho_rel[0] - rho_rel[rho_rel.len() - 1];
    let variation: f64 = rho_rel.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let min_s = *s.iter().min().expect("at least two atoms");
    report.theta_limit = Some(limit);
    report.rate_bound = Some(variation * lat.q.powf(-(settings.n_theta as f64) * min_s as f64));
    report.witness = find_witness(&report.theta, settings.witness_eps);
    report.k = k;
    report.order = order;
    report.s = s;

    if settings.n_paths > 0 {
        let sample =
            chain::sample_stopped_shift(law, &StoppingRule::LatticeReturn, settings.n_paths, settings.cap, seeds)?;
        report.empirical_span = Some(real_gcd_span(&sample.values, settings.span_tol));
        report.empirical_cap_rate = Some(sample.cap_rate);
        report.empirical_samples = sample.values.len();
    }
    Ok(report)
}

/// First pair `n < n'` (1-based) with `0 < |theta_n - theta_n'| < eps`.
pub fn find_witness(theta: &[f64], eps: f64) -> Option<(usize, usize)> {
    for i in 0..theta.len() {
        for j in i + 1..theta.len() {
            let d = (theta[i] - theta[j]).abs();
            if d > 0.0 && d < eps {
                return Some((i + 1, j + 1));
            }
        }
    }
    None
}
