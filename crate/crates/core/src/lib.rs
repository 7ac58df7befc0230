pub mod autograd;
pub mod config;
pub mod ct;
pub mod error;
pub mod losses;
pub mod model;
pub mod svd;
pub mod tensor;
pub mod training;
