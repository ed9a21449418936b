pub mod attribute;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};

/// The guide's code samples, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Autograd, "autograd.md");
    chapter!(Model, "model.md");
    chapter!(Attributes, "attributes.md");
    chapter!(Data, "data.md");
    chapter!(Training, "training.md");
    chapter!(Experiments, "experiments.md");
    chapter!(Transfer, "transfer.md");
}
