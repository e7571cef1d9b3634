pub mod bench;
pub mod eval;
pub mod fit;
pub mod gradcheck;
