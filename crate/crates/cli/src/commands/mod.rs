//! One module per subcommand.

pub mod eval;
pub mod matching;
pub mod pairgen;
pub mod train;
