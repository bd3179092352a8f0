pub mod adversarial;
pub mod cascade;
pub mod data;
pub mod evaluation;
pub mod models;
pub mod numerics;
