pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod parallel;
pub mod synth;
pub mod train;
pub mod tune;
pub mod volume;
