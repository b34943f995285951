//! Neural-network kernels and blocks.

pub mod blocks;
pub mod kernels;

pub use blocks::{Conv, DilConv, FactorizedReduce, Linear, ReluConvBn, SepConv};
pub use kernels::{ConvGeometry, PoolKind, BN_EPS};
