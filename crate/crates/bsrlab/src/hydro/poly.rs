//! Quartic polynomial views of a rule: the master-ODE right-hand side and the
//! pair merge-rate functionals, both as lists of monomials in the class
//! fractions `x = (x_1, ..., x_K, x_w)`.
//!
//! Monomials are stored as sorted quadruples of class indices (`0..K-1` for
//! the bounded classes, `K` for `w`) with exact rational coefficients, so the
//! same construction feeds both the f64 ODE solver and the exact rational
//! Taylor recursion.

use std::collections::BTreeMap;

use num::rational::Rational64;
use num::Zero;

use crate::rules::{Class, EdgeChoice, RuleTable};

/// One polynomial: exact coefficients attached to sorted index quadruples.
pub(crate) type Poly = Vec<(Rational64, [u8; 4])>;

/// Index of a class in the state vector layout `(x_1, ..., x_K, x_w)`.
pub(crate) fn class_index(c: Class, k: u8) -> u8 {
    match c {
        Class::Size(s) => s - 1,
        Class::Omega => k,
    }
}

fn monomial(quad: [Class; 4], k: u8) -> [u8; 4] {
    let mut m = [0u8; 4];
    for (slot, c) in quad.into_iter().enumerate() {
        m[slot] = class_index(c, k);
    }
    m.sort_unstable();
    m
}

fn collect(map: BTreeMap<[u8; 4], Rational64>) -> Poly {
    map.into_iter()
        .filter(|(_, v)| !v.is_zero())
        .map(|(m, v)| (v, m))
        .collect()
}

/// Per-target drift polynomials: `out[idx]` is the right-hand side of the
/// master ODE for the class with state index `idx`.
pub(crate) fn drift_polynomials(rule: &RuleTable) -> Vec<Poly> {
    let k = rule.k();
    let mut maps: Vec<BTreeMap<[u8; 4], Rational64>> =
        vec![BTreeMap::new(); usize::from(k) + 1];
    for quad in crate::rules::quadruples(k) {
        let mono = monomial(quad, k);
        for target in Class::alphabet(k) {
            let coeff = rule.drift(quad, target);
            if coeff.is_zero() {
                continue;
            }
            let idx = usize::from(class_index(target, k));
            *maps[idx].entry(mono).or_insert_with(Rational64::zero) += coeff;
        }
    }
    maps.into_iter().map(collect).collect()
}

/// Rate functional of an unordered class pair: half the probability-weighted
/// mass of quadruples whose *kept* edge joins exactly this pair of classes.
pub(crate) fn pair_rate_polynomial(rule: &RuleTable, c1: Class, c2: Class) -> Poly {
    let k = rule.k();
    let half = Rational64::new(1, 2);
    let matches = |a: Class, b: Class| (a == c1 && b == c2) || (a == c2 && b == c1);
    let mut map: BTreeMap<[u8; 4], Rational64> = BTreeMap::new();
    for quad in crate::rules::quadruples(k) {
        let kept = match rule.decide(quad) {
            EdgeChoice::First => (quad[0], quad[1]),
            EdgeChoice::Second => (quad[2], quad[3]),
        };
        if matches(kept.0, kept.1) {
            *map.entry(monomial(quad, k)).or_insert_with(Rational64::zero) += half;
        }
    }
    collect(map)
}

/// Pair polynomials feeding `a_i`: every `i1 <= i2 <= K` with `i1 + i2 = K+i`,
/// already summed into one polynomial (for `i = 1..=K`).
pub(crate) fn a_polynomials(rule: &RuleTable) -> Vec<Poly> {
    let k = rule.k();
    let mut out = Vec::with_capacity(usize::from(k));
    for i in 1..=k {
        let target = u16::from(k) + u16::from(i);
        let mut map: BTreeMap<[u8; 4], Rational64> = BTreeMap::new();
        for i1 in 1..=k {
            for i2 in i1..=k {
                if u16::from(i1) + u16::from(i2) != target {
                    continue;
                }
                for (coeff, mono) in
                    pair_rate_polynomial(rule, Class::Size(i1), Class::Size(i2))
                {
                    *map.entry(mono).or_insert_with(Rational64::zero) += coeff;
                }
            }
        }
        out.push(collect(map));
    }
    out
}

/// Pair polynomials feeding `c_i` (numerators `F_{i,w}`), for `i = 1..=K`.
pub(crate) fn c_numerator_polynomials(rule: &RuleTable) -> Vec<Poly> {
    (1..=rule.k())
        .map(|i| pair_rate_polynomial(rule, Class::Size(i), Class::Omega))
        .collect()
}

/// Numerator `F_{w,w}` of the inside-rate `b`.
pub(crate) fn b_numerator_polynomial(rule: &RuleTable) -> Poly {
    pair_rate_polynomial(rule, Class::Omega, Class::Omega)
}

/// Evaluates a polynomial at an f64 state vector.
pub(crate) fn eval_f64(poly: &Poly, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (coeff, mono) in poly {
        let c = *coeff.numer() as f64 / *coeff.denom() as f64;
        acc += c
            * x[usize::from(mono[0])]
            * x[usize::from(mono[1])]
            * x[usize::from(mono[2])]
            * x[usize::from(mono[3])];
    }
    acc
}

/// Same polynomial pre-lowered to f64 coefficients for hot loops.
pub(crate) fn lower(poly: &Poly) -> Vec<(f64, [u8; 4])> {
    poly.iter()
        .map(|(coeff, mono)| (*coeff.numer() as f64 / *coeff.denom() as f64, *mono))
        .collect()
}
