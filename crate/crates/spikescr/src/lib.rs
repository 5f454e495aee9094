//! Fully spike-driven sequence classifier with curriculum knowledge
//! distillation and synaptic-operation energy accounting.
//!
//! The crate is organized around a small reverse-mode tensor tape
//! ([`compute`]), leaky integrate-and-fire dynamics with surrogate gradients
//! ([`neuron`]), the spiking encoder stack ([`layers`]), event-stream
//! ingestion and synthetic data ([`data`]), masking/dropping augmentation
//! ([`augment`]), direct and curriculum-distillation training ([`train`]),
//! and an energy model that converts layer operation counts and measured
//! firing rates into joules ([`energy`]).
//!
//! The `examples/` directory holds one runnable walkthrough per capability;
//! the `spikescr` binary exposes the same machinery as subcommands.

pub mod augment;
pub mod cli;
pub mod compute;
pub mod data;
pub mod energy;
pub mod layers;
pub mod neuron;
pub mod testkit;
pub mod train;

pub use compute::{ComputeError, ParamId, ParamStore, Tape, Tensor, TensorId};
