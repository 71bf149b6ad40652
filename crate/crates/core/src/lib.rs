pub mod attribution;
pub mod harness;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;
