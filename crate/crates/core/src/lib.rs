pub mod basis;
pub mod filter;
pub mod fr;
pub mod hfr;
pub mod imex;
pub mod linalg;
pub mod mesh;
pub mod partition;
pub mod physics;
