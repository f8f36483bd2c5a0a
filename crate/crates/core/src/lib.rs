#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod flow;
pub mod functions;
pub mod killed;
pub mod model;
pub mod normal;
pub mod oracles;
pub mod pushforward;
pub mod reflected;
