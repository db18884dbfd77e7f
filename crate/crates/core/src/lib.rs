pub mod llmpolicy;
pub mod netsim;
pub mod simcore;
pub mod transport;
pub mod trigger;
pub mod llmclient;
pub mod heuristic;
pub mod harness;
