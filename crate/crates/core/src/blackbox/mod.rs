//! The `Gen : prompt -> response` endpoint abstraction.
//!
//! Three realizations share the [`Endpoint`] trait: an in-process simulator
//! with a known decoding strategy, an HTTP client for the wire protocol, and a
//! JSON Lines cache that records or replays traffic.

mod cache;
mod remote;
mod server;
mod sim;

pub use cache::{record, replay, CacheRecord, Recorder, Replayer};
pub use remote::{remote_connect, RemoteConfig, RemoteEndpoint};
pub use server::{serve, GenerateRequest, GenerateResponse, LogprobsRequest, LogprobsResponse, ServerHandle};
pub use sim::{simulate, SimulatedSystem};

use crate::error::Result;

/// Single-step text generation behind an opaque interface.
pub trait Endpoint {
    /// One raw response for `prompt`.
    fn generate(&mut self, prompt: &str) -> Result<String>;

    /// `n` raw responses for `prompt`; equivalent to `n` calls of [`generate`](Endpoint::generate).
    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        (0..n).map(|_| self.generate(prompt)).collect()
    }

    /// Total number of single generations performed so far.
    fn queries(&self) -> u64;
}

impl<E: Endpoint + ?Sized> Endpoint for &mut E {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        (**self).generate(prompt)
    }

    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        (**self).generate_batch(prompt, n)
    }

    fn queries(&self) -> u64 {
        (**self).queries()
    }
}

impl<E: Endpoint + ?Sized> Endpoint for Box<E> {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        (**self).generate(prompt)
    }

    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        (**self).generate_batch(prompt, n)
    }

    fn queries(&self) -> u64 {
        (**self).queries()
    }
}
