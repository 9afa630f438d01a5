pub mod bounds;
pub mod cli;
pub mod kernels;
pub mod measures;
pub mod schrodinger;
pub mod sde;
pub mod stats;
pub mod transport;
