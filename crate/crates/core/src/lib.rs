pub mod augment;
pub mod autodiff;
pub mod data;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod train;
pub mod verify;
