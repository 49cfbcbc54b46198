pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod deform;
pub mod eval;
pub mod gen_net;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod lsq;
pub mod model;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;
