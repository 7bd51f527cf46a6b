pub mod acqopt;
pub mod bench;
pub mod bo;
pub mod error;
pub mod kg;
pub mod oracle;
pub mod pfn;
pub mod priors;
pub mod riemann;
pub mod sobol;
pub mod tensor;
pub mod testkit;
pub mod transforms;

pub use error::{Error, Result};
