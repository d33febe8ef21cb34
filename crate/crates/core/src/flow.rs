//! Explicit integration of ∂ₜφ = d d*φ for closed φ.
//!
//! Each RK4 stage velocity is d of a 2-form, and the update combines the
//! stage potentials before applying d once, so every accepted state differs
//! from the initial one by an exact form.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curvature::{riemann, CurvatureBundle};
use crate::exterior::{basis, DIM};
use crate::grid::{Field, FormField};
use crate::metric::{StructureError, StructureField};
use crate::scalar::{lit, to_f64, Real};
use crate::tensor;
use crate::torsion::{torsion_from_phi, TorsionField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("positivity lost at grid point {point} (t = {t})")]
    PositivityLost { point: usize, t: f64 },
    #[error("step size {dt:e} fell below the floor {floor:e}")]
    Stalled { dt: f64, floor: f64 },
}

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

/// Derived data cached together with the stamp of the φ it came from.
#[derive(Clone, Debug)]
struct Cached<V> {
    stamp: u64,
    value: V,
}

/// A point on the flow: time, step counter, φ, and lazily derived geometry.
#[derive(Clone, Debug)]
pub struct FlowState<T> {
    t: T,
    step_index: u64,
    phi: FormField<T>,
    stamp: u64,
    structure: OnceLock<Cached<Result<StructureField<T>, StructureError>>>,
    torsion: OnceLock<Cached<TorsionField<T>>>,
    curvature: OnceLock<Cached<CurvatureBundle<T>>>,
}

impl<T: Real> FlowState<T> {
    pub fn new(t: T, step_index: u64, phi: FormField<T>) -> Self {
        assert_eq!(phi.degree(), 3);
        FlowState {
            t,
            step_index,
            phi,
            stamp: fresh_stamp(),
            structure: OnceLock::new(),
            torsion: OnceLock::new(),
            curvature: OnceLock::new(),
        }
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn phi(&self) -> &FormField<T> {
        &self.phi
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Replaces φ; every cache is dropped and the stamp renewed.
    pub fn set_phi(&mut self, phi: FormField<T>) {
        *self = FlowState::new(self.t, self.step_index, phi);
    }

    /// True when every populated cache was derived from the current φ.
    pub fn caches_consistent(&self) -> bool {
        let ok = |s: Option<u64>| s.map_or(true, |s| s == self.stamp);
        ok(self.structure.get().map(|c| c.stamp))
            && ok(self.torsion.get().map(|c| c.stamp))
            && ok(self.curvature.get().map(|c| c.stamp))
    }

    pub fn structure(&self) -> Result<&StructureField<T>, FlowError> {
        let c = self.structure.get_or_init(|| Cached {
            stamp: self.stamp,
            value: StructureField::new(self.phi.clone()),
        });
        c.value.as_ref().map_err(|e| FlowError::PositivityLost {
            point: e.point(),
            t: to_f64(self.t),
        })
    }

    pub fn torsion(&self) -> Result<&TorsionField<T>, FlowError> {
        let s = self.structure()?;
        Ok(&self
            .torsion
            .get_or_init(|| Cached {
                stamp: self.stamp,
                value: torsion_from_phi(&s.phi, &s.psi, &s.metric),
            })
            .value)
    }

    /// Curvature with T̂, S and the trace-free Weyl tensor filled in.
    pub fn curvature(&self) -> Result<&CurvatureBundle<T>, FlowError> {
        let s = self.structure()?;
        let tf = self.torsion()?;
        Ok(&self
            .curvature
            .get_or_init(|| {
                let mut b = riemann(&s.metric);
                b.attach_torsion(&tf.t, &s.metric);
                b.attach_weyl(&s.metric);
                Cached {
                    stamp: self.stamp,
                    value: b,
                }
            })
            .value)
    }

    /// ‖dφ‖∞.
    pub fn closedness(&self) -> T {
        self.phi.exterior_derivative().max_abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub safety: f64,
    pub dt_floor: f64,
    pub max_dt: f64,
    /// Bypasses the adaptive choice (used for order measurements).
    pub fixed_dt: Option<f64>,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            safety: 0.5,
            dt_floor: 1e-10,
            max_dt: 1.0,
            fixed_dt: None,
        }
    }
}

/// d*φ = −⋆dψ, the potential whose d is the velocity.
pub fn potential<T: Real>(s: &StructureField<T>) -> FormField<T> {
    s.codifferential_phi()
}

/// The velocity Δφ = d d*φ.
pub fn rhs<T: Real>(state: &FlowState<T>) -> Result<FormField<T>, FlowError> {
    Ok(potential(state.structure()?).exterior_derivative())
}

/// safety · h_min² / (1 + max(|T|² + |Rm|)), scaled down when more than two
/// axes are active so the explicit scheme stays inside its stability region.
pub fn suggested_dt<T: Real>(state: &FlowState<T>, policy: &StepPolicy) -> Result<T, FlowError> {
    if let Some(dt) = policy.fixed_dt {
        return Ok(lit(dt));
    }
    let s = state.structure()?;
    let tf = state.torsion()?;
    let b = state.curvature()?;
    let grid = state.phi.grid();
    let mut worst = T::zero();
    for p in 0..grid.npoints() {
        let g = &s.metric.at(p).g;
        let v = tensor::norm_sq_at(tf.t.at(p), 2, g)
            + crate::curvature::lambda2_norm_sq_at(b.rm.at(p), g).sqrt();
        worst = worst.max(v);
    }
    let h = grid.h_min();
    let axes = grid.active_axes().len().max(2);
    let dt = lit::<T>(policy.safety) * h * h / (T::one() + worst) * lit(2.0 / axes as f64);
    Ok(dt.min(lit(policy.max_dt)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub dt: f64,
    pub rejections: u32,
}

fn stage<T: Real>(phi: &FormField<T>, t: T) -> Result<StructureField<T>, FlowError> {
    StructureField::new(phi.clone()).map_err(|e| FlowError::PositivityLost {
        point: e.point(),
        t: to_f64(t),
    })
}

fn try_rk4<T: Real>(state: &FlowState<T>, dt: T) -> Result<FormField<T>, FlowError> {
    let half = dt / lit(2.0);
    let s1 = potential(state.structure()?);
    let y2 = state.phi.plus_scaled(half, &s1.exterior_derivative());
    let s2 = potential(&stage(&y2, state.t + half)?);
    let y3 = state.phi.plus_scaled(half, &s2.exterior_derivative());
    let s3 = potential(&stage(&y3, state.t + half)?);
    let y4 = state.phi.plus_scaled(dt, &s3.exterior_derivative());
    let s4 = potential(&stage(&y4, state.t + dt)?);
    let two = lit::<T>(2.0);
    let comb = s1
        .plus_scaled(two, &s2)
        .plus_scaled(two, &s3)
        .plus_scaled(T::one(), &s4);
    let next = state
        .phi
        .plus_scaled(dt / lit(6.0), &comb.exterior_derivative());
    stage(&next, state.t + dt)?;
    Ok(next)
}

/// One accepted RK4 step; a stage that leaves the positive cone halves dt
/// and retries.
pub fn step<T: Real>(
    state: &FlowState<T>,
    policy: &StepPolicy,
) -> Result<(FlowState<T>, StepInfo), FlowError> {
    let mut dt = suggested_dt(state, policy)?;
    let floor = lit::<T>(policy.dt_floor);
    let mut rejections = 0;
    loop {
        if dt < floor {
            return Err(FlowError::Stalled {
                dt: to_f64(dt),
                floor: policy.dt_floor,
            });
        }
        match try_rk4(state, dt) {
            Ok(phi) => {
                let next = FlowState::new(state.t + dt, state.step_index + 1, phi);
                return Ok((
                    next,
                    StepInfo {
                        dt: to_f64(dt),
                        rejections,
                    },
                ));
            }
            Err(FlowError::PositivityLost { .. }) if policy.fixed_dt.is_none() => {
                rejections += 1;
                dt /= lit(2.0);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Fixed-step trajectory of `n` steps, including the starting state.
pub fn fixed_trajectory<T: Real>(
    start: FlowState<T>,
    dt: T,
    n: usize,
) -> Result<Vec<FlowState<T>>, FlowError> {
    let policy = StepPolicy {
        fixed_dt: Some(to_f64(dt)),
        ..StepPolicy::default()
    };
    let mut out = vec![start];
    for _ in 0..n {
        let (next, _) = step(out.last().expect("non-empty"), &policy)?;
        out.push(next);
    }
    Ok(out)
}

/// Integrals of φ over the 35 coordinate 3-tori through the grid origin,
/// in canonical index order.
pub fn period_integrals<T: Real>(phi: &FormField<T>) -> Vec<T> {
    let grid = phi.grid();
    let shape = grid.shape();
    let h = grid.spacing();
    let b = basis();
    let mut out = Vec::with_capacity(DIM[3]);
    for (c, &mask) in b.masks(3).iter().enumerate() {
        let axes: Vec<usize> = (0..7).filter(|a| mask & (1 << a) != 0).collect();
        let mut sum = T::zero();
        let mut idx = [0usize; 3];
        loop {
            let mut p = 0;
            for (n, &a) in axes.iter().enumerate() {
                p += idx[n] * grid.stride(a);
            }
            sum += phi.field().at(p)[c];
            let mut n = 0;
            while n < 3 {
                idx[n] += 1;
                if idx[n] < shape[axes[n]] {
                    break;
                }
                idx[n] = 0;
                n += 1;
            }
            if n == 3 {
                break;
            }
        }
        out.push(sum * h[axes[0]] * h[axes[1]] * h[axes[2]]);
    }
    out
}

/// max_c |P_c − P⁰_c| / max_c |P⁰_c|.
pub fn period_drift<T: Real>(p0: &[T], p: &[T]) -> T {
    let scale = p0
        .iter()
        .fold(T::zero(), |m, &x| m.max(x.abs()))
        .max(T::min_positive_value());
    p0.iter()
        .zip(p)
        .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
        / scale
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCrosscheck {
    /// max |(g₊ − g₋)/2dt + 2S| / max |2S|.
    pub velocity_relative: f64,
    /// max |tr S − R − (7/3)|T|² − 2 tr T̂|: pure algebra, rounding only.
    pub trace_identity: f64,
    /// max |tr S − R − |T|²/3|: uses skewness of T, truncation-limited.
    pub trace_skew: f64,
    /// max |tr S − (2/3)R|: also uses R = −|T|², truncation-limited.
    pub trace_two_thirds: f64,
}

/// Pointwise (g₊ − g₋)/2dt + 2S at the middle state (49 components).
pub fn metric_velocity_residual<T: Real>(
    prev: &FlowState<T>,
    mid: &FlowState<T>,
    next: &FlowState<T>,
) -> Result<Field<T>, FlowError> {
    let dt2 = next.t - prev.t;
    let (gp, gn) = (&prev.structure()?.metric, &next.structure()?.metric);
    let s = mid.curvature()?.flow_tensor.as_ref().expect("attached");
    Ok(s.map(49, |p, sp, out| {
        let (a, c) = (&gp.at(p).g, &gn.at(p).g);
        for i in 0..7 {
            for j in 0..7 {
                out[i * 7 + j] = (c[i][j] - a[i][j]) / dt2 + lit::<T>(2.0) * sp[i * 7 + j];
            }
        }
    }))
}

/// Compares the centred time difference of g with −2S at the middle state,
/// and checks the trace of S.
pub fn metric_evolution_crosscheck<T: Real>(
    prev: &FlowState<T>,
    mid: &FlowState<T>,
    next: &FlowState<T>,
) -> Result<MetricCrosscheck, FlowError> {
    let res = metric_velocity_residual(prev, mid, next)?;
    let gm = &mid.structure()?.metric;
    let b = mid.curvature()?;
    let tf = mid.torsion()?;
    let s = b.flow_tensor.as_ref().expect("attached");
    let den = s.max_abs() * lit(2.0);
    let rel = if den > T::zero() {
        res.max_abs() / den
    } else {
        res.max_abs()
    };
    let tr = tensor::trace(s, gm);
    let trh = tensor::trace(b.t_hat.as_ref().expect("attached"), gm);
    let tn = tensor::norm_sq(&tf.t, 2, gm);
    let third = T::one() / lit(3.0);
    let (mut id, mut skew, mut two) = (T::zero(), T::zero(), T::zero());
    for p in 0..gm.grid().npoints() {
        let r = b.scalar.at(p)[0];
        let trs = tr.at(p)[0];
        let t2 = tn.at(p)[0];
        id = id.max((trs - r - lit::<T>(7.0) * third * t2 - lit::<T>(2.0) * trh.at(p)[0]).abs());
        skew = skew.max((trs - r - t2 * third).abs());
        two = two.max((trs - lit::<T>(2.0) * third * r).abs());
    }
    Ok(MetricCrosscheck {
        velocity_relative: to_f64(rel),
        trace_identity: to_f64(id),
        trace_skew: to_f64(skew),
        trace_two_thirds: to_f64(two),
    })
}

/// log₂(‖r₁ − r₂‖∞ / ‖r₂ − r₃‖∞) for residual fields at step sizes dt, dt/2, dt/4.
pub fn time_order<T: Real>(r1: &Field<T>, r2: &Field<T>, r3: &Field<T>) -> Option<f64> {
    let a = to_f64(r1.max_abs_diff(r2));
    let b = to_f64(r2.max_abs_diff(r3));
    (a > 0.0 && b > 0.0).then(|| (a / b).log2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::initial::{flat, perturbed, Perturbation};

    fn start(n: usize, eps: f64) -> FlowState<f64> {
        let grid = GridSpec::with_active(&[0, 1], n).unwrap();
        FlowState::new(
            0.0,
            0,
            perturbed(
                &grid,
                &Perturbation {
                    epsilon: eps,
                    ..Default::default()
                },
            ),
        )
    }

    #[test]
    fn flat_is_stationary() {
        let grid = GridSpec::<f64>::with_active(&[0, 1], 8).unwrap();
        let mut s = FlowState::new(0.0, 0, flat(&grid));
        for _ in 0..5 {
            s = step(&s, &StepPolicy::default()).unwrap().0;
        }
        assert!(s.phi().max_abs_diff(&flat(&grid)) < 1e-14);
    }

    #[test]
    fn rhs_is_exact_and_linear_in_epsilon() {
        let a = rhs(&start(16, 0.02)).unwrap();
        let b = rhs(&start(16, 0.01)).unwrap();
        assert!(a.exterior_derivative().max_abs() < 1e-13);
        let ratio = a.max_abs() / b.max_abs();
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn closedness_periods_and_volume() {
        let mut s = start(12, 0.05);
        let p0 = period_integrals(s.phi());
        let mut vol = s.structure().unwrap().hitchin_volume();
        for _ in 0..10 {
            s = step(&s, &StepPolicy::default()).unwrap().0;
            assert!(s.closedness() < 1e-12);
            let v = s.structure().unwrap().hitchin_volume();
            assert!(v >= vol * (1.0 - 1e-10), "{v} < {vol}");
            vol = v;
        }
        assert!(period_drift(&p0, &period_integrals(s.phi())) < 1e-10);
    }

    #[test]
    fn flat_periods() {
        let grid = GridSpec::<f64>::with_active(&[0, 1], 8).unwrap();
        let p = period_integrals(&flat(&grid));
        let vol3 = (2.0 * std::f64::consts::PI).powi(3);
        // φ₀ has seven unit components
        assert_eq!(p.iter().filter(|x| x.abs() > 0.0).count(), 7);
        assert!((p[0] - vol3).abs() < 1e-9);
    }

    #[test]
    fn caches_follow_stamp() {
        let mut s = start(8, 0.05);
        s.curvature().unwrap();
        assert!(s.caches_consistent());
        let old = s.stamp();
        let phi = s.phi().clone();
        s.set_phi(phi);
        assert_ne!(old, s.stamp());
        assert!(s.caches_consistent());
    }

    #[test]
    fn metric_velocity_matches_flow_tensor() {
        // centred differences around t* = dt at dt, dt/2, dt/4
        let s0 = start(12, 0.05);
        let dt = suggested_dt(&s0, &StepPolicy::default()).unwrap();
        let run = |k: usize| {
            let h = dt / k as f64;
            let tr = fixed_trajectory(s0.clone(), h, k + 1).unwrap();
            let r = metric_velocity_residual(&tr[k - 1], &tr[k], &tr[k + 1]).unwrap();
            (
                r,
                metric_evolution_crosscheck(&tr[k - 1], &tr[k], &tr[k + 1]).unwrap(),
            )
        };
        let (r1, c1) = run(1);
        let (r2, _) = run(2);
        let (r3, _) = run(4);
        let order = time_order(&r1, &r2, &r3).unwrap();
        assert!(order > 1.8, "{order}");
        assert!(c1.trace_identity < 1e-12);
        assert!(c1.trace_skew < 1e-6 && c1.trace_two_thirds < 1e-3, "{c1:?}");
    }
}
