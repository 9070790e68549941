pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod composer;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod run_config;
pub mod tensor;
pub mod train;
pub mod tuners;
pub mod verify;
