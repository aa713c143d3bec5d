//! Noise-robust compilation of synchronous multiparty protocols on digraphs,
//! together with the adversaries, graph parameters and round engine used to
//! exercise them.

pub mod graph;
pub mod util;
pub mod netsim;
pub mod protocol;
pub mod treecode;
pub mod rs;
pub mod adversaries;
pub mod routing;
pub mod compilers;
