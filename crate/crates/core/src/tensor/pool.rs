//! Recycling pool for large tensor buffers.
//!
//! Training and attack loops build and drop a tape per batch; without reuse
//! every pass re-faults megabytes of fresh pages. Buffers above a size
//! threshold are returned here on tape drop and handed back out by exact
//! length. Contents of recycled buffers are arbitrary, so callers choose
//! between [`BufPool::zeroed`] and the overwrite-everything [`BufPool::scratch`].

use std::collections::HashMap;
use std::sync::Mutex;
use std::sync::OnceLock;

use super::real::Real;

/// Buffers smaller than this many elements are cheaper to reallocate.
const MIN_POOLED_LEN: usize = 16 * 1024;
/// Per-length cap so the pool cannot grow without bound.
const MAX_SHELF: usize = 64;

pub(crate) struct BufPool<F> {
    shelves: Mutex<HashMap<usize, Vec<Vec<F>>>>,
}

impl<F: Real> BufPool<F> {
    fn new() -> Self {
        BufPool {
            shelves: Mutex::new(HashMap::new()),
        }
    }

    fn take(&self, len: usize) -> Option<Vec<F>> {
        if len < MIN_POOLED_LEN {
            return None;
        }
        self.shelves.lock().unwrap().get_mut(&len)?.pop()
    }

    /// A buffer of `len` elements with unspecified (previously valid) contents.
    pub fn scratch(&self, len: usize) -> Vec<F> {
        match self.take(len) {
            Some(v) => v,
            None => vec![F::zero(); len],
        }
    }

    /// A buffer of `len` zeros.
    pub fn zeroed(&self, len: usize) -> Vec<F> {
        match self.take(len) {
            Some(mut v) => {
                v.fill(F::zero());
                v
            }
            None => vec![F::zero(); len],
        }
    }

    /// Return a buffer for reuse.
    pub fn give(&self, v: Vec<F>) {
        let len = v.len();
        if len < MIN_POOLED_LEN {
            return;
        }
        let mut shelves = self.shelves.lock().unwrap();
        let shelf = shelves.entry(len).or_default();
        if shelf.len() < MAX_SHELF {
            shelf.push(v);
        }
    }
}

static POOL_F32: OnceLock<BufPool<f32>> = OnceLock::new();
static POOL_F64: OnceLock<BufPool<f64>> = OnceLock::new();

pub(crate) fn pool_f32() -> &'static BufPool<f32> {
    POOL_F32.get_or_init(BufPool::new)
}

pub(crate) fn pool_f64() -> &'static BufPool<f64> {
    POOL_F64.get_or_init(BufPool::new)
}
