pub mod corpus;
pub mod encoders;
pub mod evalkit;
pub mod numerics;
pub mod objectives;
pub mod trainer;
pub mod witg;
