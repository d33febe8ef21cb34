//! Built-in initial data: the flat structure and exact perturbations of it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::exterior::FormK;
use crate::g2::standard_phi;
use crate::grid::{FormField, GridSpec};
use crate::scalar::{lit, Real};

/// β = Σ amplitude_t · f_t(x) e^{p_t q_t}, and φ = φ₀ + ε dβ.
///
/// `modes` holds one integer wavenumber per active axis (missing entries
/// default to 1); `amplitudes` weights the three built-in terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub epsilon: f64,
    pub modes: Vec<u32>,
    pub amplitudes: [f64; 3],
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            epsilon: 0.05,
            modes: vec![1, 1],
            amplitudes: [1.0, 0.5, 0.25],
        }
    }
}

pub fn flat<T: Real>(grid: &Arc<GridSpec<T>>) -> FormField<T> {
    FormField::constant(grid, &standard_phi())
}

/// Pairs (p, q) for the three terms of β, preferring inactive axes so that
/// dβ mixes active and inactive directions.
fn term_pairs(active: &[usize]) -> [(usize, usize); 3] {
    let rest: Vec<usize> = (0..7).filter(|a| !active.contains(a)).collect();
    let pick = |i: usize| {
        if rest.is_empty() {
            1 + i % 6
        } else {
            rest[i % rest.len()]
        }
    };
    let mut pairs = [(pick(0), pick(1)), (pick(2), pick(3)), (pick(0), pick(2))];
    for pr in &mut pairs {
        if pr.0 == pr.1 {
            pr.1 = (pr.0 + 1..pr.0 + 7)
                .map(|a| a % 7)
                .find(|a| !active.contains(a) || rest.is_empty())
                .unwrap_or((pr.0 + 1) % 7);
        }
        if pr.0 > pr.1 {
            *pr = (pr.1, pr.0);
        }
    }
    pairs
}

/// The 2-form β sampled on the grid.
pub fn potential<T: Real>(grid: &Arc<GridSpec<T>>, pert: &Perturbation) -> FormField<T> {
    let active = grid.active_axes().to_vec();
    let pairs = term_pairs(&active);
    let periods = grid.periods();
    let two_pi = lit::<T>(std::f64::consts::TAU);
    let a0 = active.first().copied();
    let a1 = active.get(1).copied().or(a0);
    let k0 = lit::<T>(pert.modes.first().copied().unwrap_or(1) as f64);
    let k1 = lit::<T>(pert.modes.get(1).copied().unwrap_or(1) as f64);
    let amp = pert.amplitudes.map(lit::<T>);
    FormField::from_fn(grid, 2, |p| {
        let mut b = FormK::zero(2);
        let (Some(a0), Some(a1)) = (a0, a1) else {
            return b;
        };
        let x = grid.coords(p);
        let u = two_pi * x[a0] / periods[a0];
        let v = two_pi * x[a1] / periods[a1];
        let f = [
            (k0 * u + v).sin(),
            (u - k1 * v).cos() + lit::<T>(0.5) * (k0 * u).sin() * (k1 * v).sin(),
            u.sin() * (k1 * v).cos(),
        ];
        for t in 0..3 {
            let (p_, q_) = pairs[t];
            b.add_component(&[p_, q_], amp[t] * f[t]);
        }
        b
    })
}

/// φ₀ + ε dβ with the discrete exterior derivative, so dφ vanishes to rounding.
pub fn perturbed<T: Real>(grid: &Arc<GridSpec<T>>, pert: &Perturbation) -> FormField<T> {
    let db = potential(grid, pert).exterior_derivative();
    flat(grid).plus_scaled(lit(pert.epsilon), &db)
}
