pub mod autodiff;
pub mod nn;
pub mod render;
pub mod scaffold;
pub mod deform;
pub mod tia;
pub mod pipeline;
