//! Density of the noise `xi = sum_j eta_j / kappa_j`, with `eta_j` independent
//! standard exponentials and nonzero (possibly negative) rates `kappa_j`.
//!
//! One and two rates have closed forms. Three or more rates are handled by
//! convolving cell masses on a uniform lattice and normalizing to unit mass.

use serde::Serialize;

/// Lattice step used for three or more rates.
pub const DEFAULT_CONVOLUTION_STEP: f64 = 0.01;
const SUPPORT_TAIL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct HypoexpDensity {
    kappas: Vec<f64>,
    repr: Repr,
}

#[derive(Clone, Debug)]
enum Repr {
    Closed,
    Lattice {
        /// Location of `masses[0]`.
        origin: f64,
        step: f64,
        /// Density values at `origin + k * step`.
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl HypoexpDensity {
    /// Closed form where available, lattice convolution otherwise.
    pub fn new(kappas: &[f64]) -> Self {
        if kappas.len() <= 2 {
            Self {
                kappas: kappas.to_vec(),
                repr: Repr::Closed,
            }
        } else {
            Self::lattice(kappas, DEFAULT_CONVOLUTION_STEP)
        }
    }

    /// Forces the lattice convolution, whatever the number of rates.
    pub fn lattice(kappas: &[f64], step: f64) -> Self {
        assert!(step > 0.0 && !kappas.is_empty());
        // Each component is represented by point masses at cell midpoints.
        let mut origin = 0.0;
        let mut masses = vec![1.0];
        let per_component_tol = SUPPORT_TAIL / kappas.len() as f64;
        for &kappa in kappas {
            let rate = kappa.abs();
            let cells = ((-per_component_tol.ln()) / rate / step).ceil() as usize + 1;
            let mut comp: Vec<f64> = (0..cells)
                .map(|k| {
                    let lo = (-rate * k as f64 * step).exp();
                    let hi = (-rate * (k + 1) as f64 * step).exp();
                    lo - hi
                })
                .collect();
            let comp_origin = if kappa > 0.0 {
                0.5 * step
            } else {
                comp.reverse();
                -(cells as f64 - 0.5) * step
            };
            masses = convolve(&masses, &comp);
            origin += comp_origin;
        }
        let total: f64 = masses.iter().sum();
        let values = masses.iter().map(|m| m / total / step).collect();
        Self {
            kappas: kappas.to_vec(),
            repr: Repr::Lattice { origin, step, values },
        }
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    pub fn is_closed_form(&self) -> bool {
        matches!(self.repr, Repr::Closed)
    }

    pub fn eval(&self, t: f64) -> f64 {
        match &self.repr {
            Repr::Closed => closed_form(&self.kappas, t),
            Repr::Lattice { origin, step, values } => {
                let u = (t - origin) / step;
                if u < 0.0 || u > (values.len() - 1) as f64 {
                    return 0.0;
                }
                let i = (u.floor() as usize).min(values.len() - 2);
                let frac = u - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }

    /// Interval outside which at most `tail_tol` of the mass lies.
    pub fn support(&self, tail_tol: f64) -> Support {
        support(&self.kappas, tail_tol)
    }
}

/// Closed-form density for one or two rates.
///
/// Panics for more than two rates; use [`HypoexpDensity`] there.
pub fn closed_form(kappas: &[f64], t: f64) -> f64 {
    match *kappas {
        [k] => single(k, t),
        [k1, k2] => pair(k1, k2, t),
        _ => panic!("closed form needs one or two rates, got {}", kappas.len()),
    }
}

fn single(kappa: f64, t: f64) -> f64 {
    if kappa * t > 0.0 {
        kappa.abs() * (-kappa * t).exp()
    } else {
        0.0
    }
}

fn pair(k1: f64, k2: f64, t: f64) -> f64 {
    if k1 < 0.0 && k2 < 0.0 {
        return pair(-k1, -k2, -t);
    }
    if k1 > 0.0 && k2 > 0.0 {
        if t <= 0.0 {
            return 0.0;
        }
        if (k1 - k2).abs() <= 1e-12 * k1.max(k2) {
            let k = 0.5 * (k1 + k2);
            return k * k * t * (-k * t).exp();
        }
        return k1 * k2 / (k2 - k1) * ((-k1 * t).exp() - (-k2 * t).exp());
    }
    // Opposite signs: xi = E1/r - E2/l with r, l > 0.
    let (r, l) = if k1 > 0.0 { (k1, -k2) } else { (k2, -k1) };
    let c = r * l / (r + l);
    if t >= 0.0 {
        c * (-r * t).exp()
    } else {
        c * (l * t).exp()
    }
}

/// Mean `sum_j 1/kappa_j`.
pub fn mean(kappas: &[f64]) -> f64 {
    kappas.iter().map(|k| 1.0 / k).sum()
}

pub fn support(kappas: &[f64], tail_tol: f64) -> Support {
    let side = |sign: f64| -> f64 {
        let rates: Vec<f64> = kappas.iter().filter(|k| **k * sign > 0.0).map(|k| k.abs()).collect();
        if rates.is_empty() {
            return 0.0;
        }
        let slowest = rates.iter().cloned().fold(f64::INFINITY, f64::min);
        gamma_tail_point(rates.len(), 0.5 * tail_tol) / slowest
    };
    Support {
        lo: -side(-1.0),
        hi: side(1.0),
    }
}

/// Smallest `t` (on a 1/64 grid) with `P(Gamma(shape, 1) > t) <= tol`.
fn gamma_tail_point(shape: usize, tol: f64) -> f64 {
    let tail = |t: f64| -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..shape {
            term *= t / k as f64;
            sum += term;
        }
        (-t).exp() * sum
    };
    let mut t = 0.0;
    while tail(t) > tol {
        t += 1.0 / 64.0;
    }
    t
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}
