pub mod corrupt;
pub mod detector;
pub mod eval;
pub mod scene;
pub mod train;
