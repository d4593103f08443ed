pub mod analysis;
pub mod inference;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod trajectory;
pub mod verify;
