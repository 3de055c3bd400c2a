pub mod autodiff;
pub mod corpus;
pub mod editor;
pub mod locator;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
