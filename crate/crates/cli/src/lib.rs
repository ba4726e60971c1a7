//! Command implementations and the annotation HTTP service behind the
//! `terraexpr` binary.

pub mod commands;
pub mod service;
