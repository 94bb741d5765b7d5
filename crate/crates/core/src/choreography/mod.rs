mod message;
mod sim;

pub use message::*;
pub use sim::{forbidden, run, RunOutcome, RunStatus, Simulation};
