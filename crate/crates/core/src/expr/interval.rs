//! Closed real intervals and axis-aligned boxes.
//!
//! Arithmetic is the natural inclusion-isotonic extension of the real
//! operations. No outward rounding is performed; consumers that need a
//! margin against floating-point error apply [`SOUNDNESS_SLACK`].

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use super::ExprError;

/// Absolute slack subtracted from lower bounds before sign decisions.
pub const SOUNDNESS_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "malformed interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Largest absolute value in the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    pub fn checked_div(self, rhs: Interval) -> Result<Interval, ExprError> {
        if rhs.contains_zero() {
            return Err(ExprError::DivisionByZero);
        }
        let inv = Interval::new(1.0 / rhs.hi, 1.0 / rhs.lo);
        Ok(self * inv)
    }

    /// Exact range of `x^k` over the interval.
    pub fn powi(self, k: u32) -> Interval {
        match k {
            0 => Interval::point(1.0),
            1 => self,
            _ => {
                let a = self.lo.powi(k as i32);
                let b = self.hi.powi(k as i32);
                if k % 2 == 1 {
                    Interval::new(a, b)
                } else if self.contains_zero() {
                    Interval::new(0.0, a.max(b))
                } else {
                    Interval::new(a.min(b), a.max(b))
                }
            }
        }
    }

    pub fn sin(self) -> Interval {
        if self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.sin(), self.hi.sin());
        let mut lo = a.min(b);
        let mut hi = a.max(b);
        if contains_phase(self, FRAC_PI_2) {
            hi = 1.0;
        }
        if contains_phase(self, -FRAC_PI_2) {
            lo = -1.0;
        }
        Interval::new(lo, hi)
    }

    pub fn cos(self) -> Interval {
        if self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.cos(), self.hi.cos());
        let mut lo = a.min(b);
        let mut hi = a.max(b);
        if contains_phase(self, 0.0) {
            hi = 1.0;
        }
        if contains_phase(self, PI) {
            lo = -1.0;
        }
        Interval::new(lo, hi)
    }

    pub fn exp(self) -> Interval {
        Interval::new(self.lo.exp(), self.hi.exp())
    }

    pub fn sqrt(self) -> Result<Interval, ExprError> {
        if self.lo < 0.0 {
            return Err(ExprError::Domain("sqrt of an interval reaching below zero"));
        }
        Ok(Interval::new(self.lo.sqrt(), self.hi.sqrt()))
    }

    /// Smallest interval containing both operands.
    pub fn hull(self, other: Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }
}

/// Whether `phase + 2kπ` lies in the interval for some integer k.
fn contains_phase(iv: Interval, phase: f64) -> bool {
    let k = ((iv.lo - phase) / TAU).ceil();
    phase + k * TAU <= iv.hi
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval::new(self.lo + rhs.lo, self.hi + rhs.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval::new(self.lo - rhs.hi, self.hi - rhs.lo)
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval::new(lo, hi)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

/// Axis-aligned box `[lb, ub]` in R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperbox {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self, ExprError> {
        if lb.len() != ub.len() {
            return Err(ExprError::Dimension {
                expected: lb.len(),
                found: ub.len(),
            });
        }
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(ExprError::BadBox(i));
            }
        }
        Ok(Hyperbox { lb, ub })
    }

    /// Degenerate box holding a single point.
    pub fn point(p: &[f64]) -> Self {
        Hyperbox {
            lb: p.to_vec(),
            ub: p.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lb.iter().zip(&self.ub).map(|(l, u)| u - l).collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lb
            .iter()
            .zip(&self.ub)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Sum of squared widths.
    pub fn diameter_sq(&self) -> f64 {
        self.lb
            .iter()
            .zip(&self.ub)
            .map(|(l, u)| (u - l) * (u - l))
            .sum()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .zip(self.lb.iter().zip(&self.ub))
                .all(|(x, (l, u))| *l <= *x && *x <= *u)
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lb
            .iter()
            .zip(&self.ub)
            .map(|(l, u)| Interval::new(*l, *u))
            .collect()
    }

    /// Index of the widest dimension, lowest index on ties.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        let mut best_w = f64::NEG_INFINITY;
        for (i, w) in self.widths().into_iter().enumerate() {
            if w > best_w {
                best = i;
                best_w = w;
            }
        }
        best
    }

    /// Split at the midpoint of dimension `dim`.
    pub fn bisect(&self, dim: usize) -> (Hyperbox, Hyperbox) {
        let mid = 0.5 * (self.lb[dim] + self.ub[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.ub[dim] = mid;
        right.lb[dim] = mid;
        (left, right)
    }

    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lb.iter().zip(&self.ub))
            .map(|(x, (l, u))| x.clamp(*l, *u))
            .collect()
    }

    /// All 2^d corners, first coordinate varying fastest.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.ub[i]
                        } else {
                            self.lb[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}
