//! Closed G2-structures on the flat 7-torus: pointwise exterior algebra,
//! finite-difference geometry on a periodic grid, the Laplacian flow, and
//! numerical checks of the curvature and evolution identities.
//!
//! Everything numerical is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix the precision.

// Index loops mirror the tensor notation; per-point scratch stays on the heap;
// `!(x > 0)` is the NaN-rejecting form on purpose.
#![allow(
    clippy::needless_range_loop,
    clippy::useless_vec,
    clippy::neg_cmp_op_on_partial_ord
)]

pub mod curvature;
pub mod evolution;
pub mod exterior;
pub mod flow;
pub mod g2;
pub mod grid;
pub mod initial;
pub mod linalg;
pub mod metric;
pub mod pinching;
pub mod scalar;
pub mod snapshot;
pub mod tensor;
pub mod torsion;

pub use scalar::Real;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type FormK64 = exterior::FormK<f64>;
pub type MetricPoint64 = g2::MetricPoint<f64>;
pub type GridSpec64 = grid::GridSpec<f64>;
pub type Field64 = grid::Field<f64>;
pub type FormField64 = grid::FormField<f64>;
pub type MetricField64 = metric::MetricField<f64>;
pub type StructureField64 = metric::StructureField<f64>;
pub type TorsionField64 = torsion::TorsionField<f64>;
pub type CurvatureBundle64 = curvature::CurvatureBundle<f64>;
pub type FlowState64 = flow::FlowState<f64>;

pub type FormK32 = exterior::FormK<f32>;
pub type MetricPoint32 = g2::MetricPoint<f32>;
pub type GridSpec32 = grid::GridSpec<f32>;
pub type Field32 = grid::Field<f32>;
pub type FormField32 = grid::FormField<f32>;
pub type MetricField32 = metric::MetricField<f32>;
pub type StructureField32 = metric::StructureField<f32>;
pub type TorsionField32 = torsion::TorsionField<f32>;
pub type CurvatureBundle32 = curvature::CurvatureBundle<f32>;
pub type FlowState32 = flow::FlowState<f32>;
