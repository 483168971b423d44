//! Task sequences and the drivers that run each method over them.

mod protocol;
mod run;

pub use protocol::*;
pub use run::*;
