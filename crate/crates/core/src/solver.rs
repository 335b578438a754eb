//! Grid solutions of `y(x) = E{y(alpha (x - beta))}` by fixed-point iteration.
//!
//! A [`GridFunction`] is piecewise linear between nodes and constant beyond
//! the end nodes. The averaging operator `T` is discretized once per law into
//! an [`Operator`]: point-mass shifts are exact, continuous shifts use a
//! trapezoid rule on the truncated support with weights summing to one.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laws::{CoefficientLaw, ShiftLaw};

pub const DEFAULT_QUAD_STEP: f64 = 0.01;
pub const DEFAULT_TAIL_TOL: f64 = 1e-10;
/// Out-of-grid image mass a node may carry and still count as interior.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("atom {atom}: quadrature mass {mass} misses 1 by more than tail_tol and renormalization is off")]
    QuadratureUnderflow { atom: usize, mass: f64 },
    #[error("invalid quadrature settings: {0}")]
    InvalidQuadrature(String),
    #[error("offset h = {h} is below the grid spacing {dx}")]
    OffsetBelowSpacing { h: f64, dx: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    #[default]
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub x_min: f64,
    pub dx: f64,
    pub values: Vec<f64>,
    #[serde(default)]
    pub extension: Extension,
}

/// Metadata written next to a grid CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridHeader {
    pub x_min: f64,
    pub dx: f64,
    pub n: usize,
    pub extension: Extension,
}

impl GridFunction {
    pub fn new(x_min: f64, dx: f64, values: Vec<f64>) -> Result<Self, SolverError> {
        if !(dx > 0.0 && dx.is_finite() && x_min.is_finite()) {
            return Err(SolverError::InvalidGrid(format!("x_min = {x_min}, dx = {dx}")));
        }
        if values.len() < 2 {
            return Err(SolverError::InvalidGrid("at least two nodes are required".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::InvalidGrid(format!("value at node {i} is not finite")));
        }
        Ok(Self {
            x_min,
            dx,
            values,
            extension: Extension::Clamp,
        })
    }

    /// Samples `f` at `x_min, x_min + dx, ...` up to `x_max` (rounded to a node).
    pub fn from_fn(x_min: f64, x_max: f64, dx: f64, f: impl Fn(f64) -> f64) -> Result<Self, SolverError> {
        if x_max.is_nan() || x_min.is_nan() || x_max <= x_min {
            return Err(SolverError::InvalidGrid(format!("x_max = {x_max} <= x_min = {x_min}")));
        }
        let n = ((x_max - x_min) / dx).round() as usize + 1;
        Self::new(x_min, dx, (0..n).map(|i| f(x_min + i as f64 * dx)).collect())
    }

    pub fn constant(x_min: f64, x_max: f64, dx: f64, c: f64) -> Result<Self, SolverError> {
        Self::from_fn(x_min, x_max, dx, |_| c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn x_max(&self) -> f64 {
        self.node(self.len() - 1)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self { values, ..self.clone() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.x_min) / self.dx;
        let last = self.len() - 1;
        if u <= 0.0 {
            return self.values[0];
        }
        if u >= last as f64 {
            return self.values[last];
        }
        let i = u.floor() as usize;
        let frac = u - i as f64;
        if frac == 0.0 {
            return self.values[i];
        }
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max - min` over all nodes.
    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    /// The middle half `[x_min + L/4, x_max - L/4]`.
    pub fn middle_half(&self) -> (f64, f64) {
        let quarter = 0.25 * (self.x_max() - self.x_min);
        (self.x_min + quarter, self.x_max() - quarter)
    }

    /// Sup distance over the nodes of `self`, interpolating `other` when the
    /// two grids differ.
    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        let same = self.x_min == other.x_min && self.dx == other.dx && self.len() == other.len();
        if same {
            return self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        }
        (0..self.len())
            .map(|i| (self.values[i] - other.eval(self.node(i))).abs())
            .fold(0.0, f64::max)
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            x_min: self.x_min,
            dx: self.dx,
            n: self.len(),
            extension: self.extension,
        }
    }

    /// CSV with columns `x,y`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", self.node(i), v).unwrap();
        }
        out
    }
}

/// `max - min` of the interpolated function over `[lo, hi]`.
pub fn dispersion(y: &GridFunction, (lo, hi): (f64, f64)) -> f64 {
    let (mut mn, mut mx) = (y.eval(lo).min(y.eval(hi)), y.eval(lo).max(y.eval(hi)));
    for (i, &v) in y.values.iter().enumerate() {
        let x = y.node(i);
        if x > lo && x < hi {
            mn = mn.min(v);
            mx = mx.max(v);
        }
    }
    mx - mn
}

/// `max_j |y(x_j + h) - y(x_j)|` over the nodes.
pub fn modulus_of_continuity(y: &GridFunction, h: f64) -> Result<f64, SolverError> {
    if h < y.dx * (1.0 - 1e-12) {
        return Err(SolverError::OffsetBelowSpacing { h, dx: y.dx });
    }
    Ok((0..y.len())
        .map(|i| (y.eval(y.node(i) + h) - y.values[i]).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadSettings {
    /// Target node spacing for continuous shift laws.
    pub h: f64,
    pub tail_tol: f64,
    pub renormalize: bool,
    pub boundary_tol: f64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self {
            h: DEFAULT_QUAD_STEP,
            tail_tol: DEFAULT_TAIL_TOL,
            renormalize: true,
            boundary_tol: DEFAULT_BOUNDARY_TOL,
        }
    }
}

#[derive(Clone, Debug)]
struct AtomRule {
    p: f64,
    a: f64,
    t: Vec<f64>,
    w: Vec<f64>,
}

/// The averaging operator of a law, discretized in the shift variable.
#[derive(Clone, Debug)]
pub struct Operator {
    rules: Vec<AtomRule>,
    settings: QuadSettings,
}

impl Operator {
    pub fn new(law: &CoefficientLaw, settings: QuadSettings) -> Result<Self, SolverError> {
        if !(settings.h > 0.0 && settings.tail_tol > 0.0 && settings.tail_tol < 1.0) {
            return Err(SolverError::InvalidQuadrature(format!("{settings:?}")));
        }
        let rules = law
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, atom)| {
                let (t, w) = shift_rule(&atom.shift, &settings, i)?;
                Ok(AtomRule {
                    p: atom.p,
                    a: atom.a,
                    t,
                    w,
                })
            })
            .collect::<Result<Vec<_>, SolverError>>()?;
        Ok(Self { rules, settings })
    }

    pub fn settings(&self) -> &QuadSettings {
        &self.settings
    }

    /// Total number of quadrature nodes over all atoms.
    pub fn nodes(&self) -> usize {
        self.rules.iter().map(|r| r.t.len()).sum()
    }

    /// `(T y)(x)` at one point, as `y(x)` plus averaged differences so that
    /// constants are reproduced bit for bit.
    pub fn eval_at(&self, y: &GridFunction, x: f64) -> f64 {
        let y0 = y.eval(x);
        let mut acc = 0.0;
        for r in &self.rules {
            let mut s = 0.0;
            for (t, w) in r.t.iter().zip(&r.w) {
                s += w * (y.eval(r.a * (x - t)) - y0);
            }
            acc += r.p * s;
        }
        y0 + acc
    }

    pub fn apply(&self, y: &GridFunction) -> GridFunction {
        let values = (0..y.len())
            .into_par_iter()
            .map(|i| self.eval_at(y, y.node(i)))
            .collect();
        y.with_values(values)
    }

    /// Image mass each node sends outside the grid.
    pub fn outside_mass(&self, y: &GridFunction) -> Vec<f64> {
        let slack = 1e-9 * y.dx;
        let (lo, hi) = (y.x_min - slack, y.x_max() + slack);
        (0..y.len())
            .into_par_iter()
            .map(|i| {
                let x = y.node(i);
                self.rules
                    .iter()
                    .map(|r| {
                        r.p * r
                            .t
                            .iter()
                            .zip(&r.w)
                            .filter(|(t, _)| {
                                let img = r.a * (x - *t);
                                img < lo || img > hi
                            })
                            .map(|(_, w)| w)
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    /// Nodes whose images stay on the grid up to `boundary_tol` of mass.
    pub fn interior_mask(&self, y: &GridFunction) -> Vec<bool> {
        self.outside_mass(y)
            .into_iter()
            .map(|m| m <= self.settings.boundary_tol)
            .collect()
    }
}

fn shift_rule(shift: &ShiftLaw, settings: &QuadSettings, atom: usize) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    if let Some(b) = shift.point() {
        return Ok((vec![b], vec![1.0]));
    }
    let density = shift.density_fn().expect("continuous shift has a density");
    let (support, singular) = shift.effective_support(settings.tail_tol);
    let mut cuts = vec![support.lo, support.hi];
    if singular > support.lo && singular < support.hi {
        cuts.insert(1, singular);
    }
    let mut t = Vec::new();
    let mut w: Vec<f64> = Vec::new();
    for seg in cuts.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        let cells = ((hi - lo) / settings.h).ceil().max(1.0) as usize;
        let step = (hi - lo) / cells as f64;
        // One-sided limits at the segment ends, so jumps at cut points are
        // integrated from the correct side.
        let nudge = 1e-9 * step;
        let f = |k: usize| -> f64 {
            let x = lo + k as f64 * step;
            if k == 0 {
                density(x + nudge)
            } else if k == cells {
                density(x - nudge)
            } else {
                density(x)
            }
        };
        let start = if t.is_empty() { 0 } else { 1 };
        if start == 1 {
            // Shared cut point: add this segment's left half-cell.
            *w.last_mut().unwrap() += 0.5 * step * f(0);
        }
        for k in start..=cells {
            let half = k == 0 || k == cells;
            t.push(lo + k as f64 * step);
            w.push(if half { 0.5 } else { 1.0 } * step * f(k));
        }
    }
    let mass: f64 = w.iter().sum();
    if settings.renormalize {
        w.iter_mut().for_each(|v| *v /= mass);
    } else if (mass - 1.0).abs() > settings.tail_tol {
        return Err(SolverError::QuadratureUnderflow { atom, mass });
    }
    // Zero-weight nodes cost time and change nothing.
    let (t, w): (Vec<f64>, Vec<f64>) = t.into_iter().zip(w).filter(|(_, w)| *w > 0.0).unzip();
    Ok((t, w))
}

/// `T y` on the grid of `y`.
pub fn apply_operator(y: &GridFunction, law: &CoefficientLaw, quad: QuadSettings) -> Result<GridFunction, SolverError> {
    Ok(Operator::new(law, quad)?.apply(y))
}

/// `max |y - T y|` over interior nodes; NaN when no node is interior.
pub fn residual_sup(y: &GridFunction, op: &Operator) -> f64 {
    let ty = op.apply(y);
    let mask = op.interior_mask(y);
    let mut out = f64::NAN;
    for ((v, t), _) in y.values.iter().zip(&ty.values).zip(&mask).filter(|(_, m)| **m) {
        let r = (v - t).abs();
        out = if out.is_nan() { r } else { out.max(r) };
    }
    out
}

/// `max |y - T y|` over every node, boundary layer included.
pub fn residual_sup_all(y: &GridFunction, op: &Operator) -> f64 {
    y.sup_distance(&op.apply(y))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationTrace {
    /// `||y_{k+1} - y_k||_inf`.
    pub step_norm: Vec<f64>,
    /// Dispersion of `y_{k+1}` over the middle half of the grid.
    pub dispersion: Vec<f64>,
    /// `max - min` of `y_{k+1}` over the whole grid.
    pub range: Vec<f64>,
    /// Interior residual of the returned iterate.
    pub final_residual: f64,
    /// Iteration at which the step norm first met the tolerance.
    pub converged_at: Option<usize>,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.step_norm.len()
    }

    pub fn final_dispersion(&self) -> Option<f64> {
        self.dispersion.last().copied()
    }

    /// First iteration whose dispersion is below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.dispersion.iter().position(|d| *d < threshold)
    }

    /// CSV with columns `iter,step_norm,dispersion,range`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,step_norm,dispersion,range\n");
        for k in 0..self.iterations() {
            writeln!(
                out,
                "{},{:e},{:e},{:e}",
                k + 1,
                self.step_norm[k],
                self.dispersion[k],
                self.range[k]
            )
            .unwrap();
        }
        out
    }
}

/// Iterates `y <- T y` until the step norm is at most `step_tol` or
/// `max_iter` applications have been made.
pub fn picard_iterate(
    y0: &GridFunction,
    op: &Operator,
    max_iter: usize,
    step_tol: f64,
) -> (GridFunction, IterationTrace) {
    let window = y0.middle_half();
    let mut trace = IterationTrace::default();
    let mut y = y0.clone();
    for k in 0..max_iter {
        let next = op.apply(&y);
        let step = next.sup_distance(&y);
        trace.step_norm.push(step);
        trace.dispersion.push(dispersion(&next, window));
        trace.range.push(next.range());
        y = next;
        if step <= step_tol {
            trace.converged_at = Some(k);
            break;
        }
    }
    trace.final_residual = residual_sup(&y, op);
    (y, trace)
}
