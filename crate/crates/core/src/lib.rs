//! Matrix-weighted geodesic X-ray transforms on a single coordinate chart.
//!
//! The crate is organised bottom-up: [`manifold`] traces geodesics,
//! [`transport`] solves the connection/Higgs transport ODE along them,
//! [`xray`] integrates sections against the resulting weights,
//! [`normal_op`] builds the localized exponentially conjugated normal
//! operator near a convex boundary point, and [`inversion`] solves it.
//! [`convexity`] and [`applications`] sit on the side.

pub mod applications;
pub mod convexity;
pub mod error;
pub mod grid;
pub mod io;
pub mod inversion;
pub mod linalg;
pub mod manifold;
pub mod normal_op;
pub mod poly;
pub mod transport;
pub mod xray;

pub use error::{Error, Result};
pub use linalg::{CMat, CVec, C64};
pub use manifold::{ChartManifold, Direction, FanSpec, GeodesicPath, PhasePoint};
pub use grid::{GridField, GridGeometry, NodeRole};
pub use normal_op::{CollarSpec, NormalOperator, SymbolMode, SymbolQuery};
pub use transport::{ConnectionPair, GaugeTransform, PairClass, ScatteringData};
pub use xray::SectionPair;
