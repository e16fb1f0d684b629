//! The localized, exponentially conjugated normal operator near a strictly
//! convex boundary point: collar geometry, the cached discrete operator, its
//! boundary kernel and numerical symbols.

mod collar;
mod operator;
mod symbol;

pub use collar::{
    build_collar, sphere_quadrature, ChiProfile, CollarParams, CollarSpec, DirectionFamily, FieldFrame, LevelFamily,
};
pub use operator::{
    collar_roles, family_keys, local_family_sampler, FamilyKey, FieldMode, NfSpec, NormalOperator, WeightSource, Weighting,
};
pub use symbol::{
    boundary_kernel, ellipticity_scan, symbol_boundary, symbol_fiber_infinity, BoundaryWeight, ScanReport, ScanSpec,
    SymbolMode, SymbolQuery,
};
