//! Defense pipeline for conditional image editors under adversarial
//! disruption: seeded synthetic fixtures, a differentiable toy editor, two
//! complementary detectors, greedy mask-guided reconstruction, and the
//! attack suite to exercise them.

pub mod attacks;
pub mod detector;
pub mod generator;
pub mod harness;
pub mod imagecore;
pub mod metrics;
pub mod recnet;
pub mod transforms;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
