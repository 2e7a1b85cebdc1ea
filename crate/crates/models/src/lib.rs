pub mod checkpoint;
pub mod condition;
pub mod conv;
pub mod error;
pub mod ops;
pub mod params;
pub mod parsing;
pub mod shape;
pub mod texture;
