//! Concrete backbones: synthetic trajectory generators and trace replay.

pub mod synthetic;
pub mod trace;

pub use synthetic::{Preset, Regime, SyntheticBackbone, SyntheticSpec};
pub use trace::{read_trace, write_trace, TraceBackbone, TraceData, TraceError};
