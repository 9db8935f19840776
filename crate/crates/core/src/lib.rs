// `!(x > 0.0)` also rejects NaN, which the suggested rewrite would not make obvious.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod binfile;
pub mod client;
pub mod collective;
pub mod datagen;
pub mod library;
pub mod linalg;
pub mod protocol;
pub mod server;
pub mod solver;
pub mod store;
