//! Concept-bottleneck energy models trained with diffusion score matching,
//! plus a synthetic latent world with an analytic oracle for checking them.
//!
//! The guide in `book/` walks through the modules; its snippets run as
//! doc-tests of this crate.

pub mod diffengine;
pub mod diffusion;
pub mod energymodel;
pub mod error;
pub mod evalsuite;
pub mod sampler;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Overview, "overview.md");
    chapter!(World, "world.md");
    chapter!(Energies, "energies.md");
    chapter!(Training, "training.md");
    chapter!(Sampling, "sampling.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
    chapter!(Service, "service.md");
}
