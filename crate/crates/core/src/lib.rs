pub mod canon;
pub mod chem;
pub mod error;
pub mod eval;
pub mod fraggraph;
pub mod gfn;
pub mod oracle;
pub mod pocket;
pub mod policy;
pub mod proxy;
pub mod reward;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
