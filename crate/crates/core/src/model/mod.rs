//! The base encoder-decoder transformer.

pub mod checkpoint;
pub mod config;
pub mod hooks;
pub mod layers;
pub mod params;
pub mod transformer;

pub use config::{Architecture, ModelConfig, Positions};
pub use hooks::{sites, HookPoint, Site, Stack, SublayerKind, SublayerTrace, TraceEntry};
pub use params::{ParamId, ParamStore, Parameter};
pub use transformer::{Encoded, Forward, PrefixForm, Transformer};
