pub mod bench;
pub mod classical;
pub mod cmnet;
pub mod dtl;
pub mod error;
pub mod features;
pub mod linalg;
pub mod rng;
pub mod sysmodel;

pub use error::{Error, Result};
