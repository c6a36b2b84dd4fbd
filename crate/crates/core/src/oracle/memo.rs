use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ModelMeta, OracleError, ValueOracle, ValueRequest, ValueResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounters {
    /// Requests received, hits included.
    pub total: u64,
    /// Distinct requests forwarded to the inner oracle and cached.
    pub unique: u64,
}

/// Caches responses by full request and counts traffic.
///
/// Errors from the inner oracle are passed through and never cached.
pub struct Memoized<O> {
    inner: O,
    cache: Mutex<HashMap<ValueRequest, ValueResponse>>,
    total: AtomicU64,
    unique: AtomicU64,
}

pub fn memoized<O: ValueOracle>(inner: O) -> Memoized<O> {
    Memoized { inner, cache: Mutex::new(HashMap::new()), total: AtomicU64::new(0), unique: AtomicU64::new(0) }
}

impl<O: ValueOracle> Memoized<O> {
    pub fn counters(&self) -> CallCounters {
        CallCounters { total: self.total.load(Ordering::SeqCst), unique: self.unique.load(Ordering::SeqCst) }
    }

    /// Drops cached responses and resets both counters.
    pub fn clear(&self) {
        let mut cache = self.cache.lock().expect("memo cache poisoned");
        cache.clear();
        self.total.store(0, Ordering::SeqCst);
        self.unique.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: ValueOracle> ValueOracle for Memoized<O> {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        self.total.fetch_add(1, Ordering::SeqCst);
        if let Some(hit) = self.cache.lock().expect("memo cache poisoned").get(request) {
            return Ok(hit.clone());
        }
        // The lock is not held across the inner call; concurrent misses on the
        // same key may both reach the inner oracle, but only one is counted.
        let response = self.inner.evaluate(request)?;
        let mut cache = self.cache.lock().expect("memo cache poisoned");
        let entry = cache.entry(request.clone()).or_insert_with(|| {
            self.unique.fetch_add(1, Ordering::SeqCst);
            response
        });
        Ok(entry.clone())
    }

    fn meta(&self) -> ModelMeta {
        self.inner.meta()
    }
}
