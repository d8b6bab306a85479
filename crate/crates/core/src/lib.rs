pub mod expr;
pub mod interp;
pub mod jet;
pub mod model;
pub mod parser;
pub mod poly;
pub mod series;
