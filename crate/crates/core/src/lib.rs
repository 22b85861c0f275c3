//! A simulated x86-64 machine with rings, segments and callgates, and a
//! privileged-user execution mode built on top of it.

pub mod gate;
pub mod layout;
pub mod lotr;
pub mod machine;
pub mod transfer;
pub mod verifier;
pub mod scenario;
