//! Shared test doubles.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::backends::{Backbone, BackboneRequest};
use crate::state::PoolRng;
use crate::{Error, Result};

/// Backbone driven by a closure.
pub struct FnBackbone<F>(pub F)
where
    F: Fn(&BackboneRequest, &mut PoolRng) -> Result<String> + Send + Sync;

impl<F> Backbone for FnBackbone<F>
where
    F: Fn(&BackboneRequest, &mut PoolRng) -> Result<String> + Send + Sync,
{
    fn invoke(&self, request: &BackboneRequest, rng: &mut PoolRng) -> Result<String> {
        (self.0)(request, rng)
    }
}

/// Backbone that replays a fixed script of outputs; `Err` entries produce
/// backend errors. Panics when the script runs dry.
pub struct ScriptedBackbone {
    script: Mutex<std::collections::VecDeque<std::result::Result<String, String>>>,
}

impl ScriptedBackbone {
    pub fn new<I: IntoIterator<Item = std::result::Result<String, String>>>(outputs: I) -> Self {
        ScriptedBackbone { script: Mutex::new(outputs.into_iter().collect()) }
    }

    pub fn ok<I: IntoIterator<Item = &'static str>>(outputs: I) -> Self {
        Self::new(outputs.into_iter().map(|s| Ok(s.to_string())))
    }
}

impl Backbone for ScriptedBackbone {
    fn invoke(&self, _request: &BackboneRequest, _rng: &mut PoolRng) -> Result<String> {
        let next = self
            .script
            .lock()
            .unwrap()
            .pop_front()
            .expect("scripted backbone ran out of outputs");
        next.map_err(Error::Backend)
    }
}

/// Wrapper that counts invocations.
pub struct Counting<B: Backbone> {
    pub inner: B,
    pub count: AtomicUsize,
}

impl<B: Backbone> Counting<B> {
    pub fn new(inner: B) -> Self {
        Counting { inner, count: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl<B: Backbone> Backbone for Counting<B> {
    fn invoke(&self, request: &BackboneRequest, rng: &mut PoolRng) -> Result<String> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.invoke(request, rng)
    }
}
