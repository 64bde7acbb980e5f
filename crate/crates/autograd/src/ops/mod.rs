mod elementwise;
mod linalg;
mod nn;
mod shape;
pub mod spatial;
