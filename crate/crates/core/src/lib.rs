//! Compiles discrete-time state-space models, including multilayer
//! perceptrons rewritten in state-space form, into synthesizable Verilog.
//!
//! The flow is: build a [`model::StateSpaceModel`], check it against the
//! double-precision and bit-accurate fixed-point simulators in [`sim`],
//! lower it to a [`netlist::Netlist`] with [`elaborate`], optionally run the
//! optimization [`passes`], verify the result cycle by cycle with [`rtlsim`],
//! and emit Verilog with [`verilog`].

pub mod fixed;
pub mod model;
pub mod nn;
pub mod sim;
pub mod controller;
pub mod elaborate;
pub mod netlist;
pub mod rtlsim;
pub mod passes;
pub mod verilog;
pub mod cli;
