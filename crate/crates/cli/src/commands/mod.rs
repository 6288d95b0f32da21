pub mod evaluate;
pub mod gradcheck;
pub mod prepare;
pub mod seg;
pub mod train;
