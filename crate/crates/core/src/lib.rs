//! Lane-topology perception on synthetic scenes: scene types, map encoding,
//! BEV heads, matching losses, metrics and the scene generator.

pub mod bev;
pub mod encoding;
pub mod error;
pub mod hungarian;
pub mod losses;
pub mod map_encoder;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod scenegen;

pub use error::{CoreError, CoreResult};
