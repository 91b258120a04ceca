// SPDX-License-Identifier: Apache-2.0

//! Cycle-level model of an FPGA multi-accelerator interface attached to a
//! mesh network-on-chip, with shared-bus and shared-cache baselines.

pub mod baselines;
pub mod channel;
pub mod codec;
pub mod config;
pub mod endpoints;
pub mod fabric;
pub mod fpga;
pub mod harness;
pub mod interface;
pub mod kernel;
pub mod noc;
pub mod suites;
pub mod system;
