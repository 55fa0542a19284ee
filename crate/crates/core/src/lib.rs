pub mod bench;
pub mod coa;
pub mod counters;
pub mod error;
pub mod lsp;
pub mod memory;
pub mod network;
pub mod nla;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
