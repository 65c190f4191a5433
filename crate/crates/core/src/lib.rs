pub mod als;
pub mod cavi;
pub mod consensus;
pub mod datagen;
pub mod error;
pub mod ingest;
pub mod init;
pub mod io;
pub mod metrics;
pub mod prob;
pub mod registry;
pub mod svi;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FactorModel, Tensor};
