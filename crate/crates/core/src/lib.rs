pub mod baselines;
pub mod dataset_builder;
pub mod geometry;
pub mod image;
pub mod kitti_io;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod trainer;
