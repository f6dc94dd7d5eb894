//! One module per CLI subcommand.

pub mod gradcheck;
pub mod lemmas;
pub mod report;
pub mod sync;
pub mod train;
