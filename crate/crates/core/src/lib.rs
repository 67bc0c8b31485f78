pub mod data;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod spectral;
pub mod tensor;
pub mod training;
