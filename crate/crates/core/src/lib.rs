//! Information-seeking policy iteration on finite MDPs.
//!
//! The guide in `book/` walks through the modules in order; its code
//! listings are compiled as doc-tests of this crate.

pub mod agent;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod future;
pub mod inference;
pub mod mdp;
pub mod numeric;
pub mod rng;
pub mod solver;
pub mod tables;
pub mod variational;

// One module per book chapter so a failing listing points at its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/information.md")]
    mod information {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/variational.md")]
    mod variational {}
    #[doc = include_str!("../../../book/src/agent.md")]
    mod agent {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
