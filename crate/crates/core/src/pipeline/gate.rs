use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use crate::store::{LayerStore, StoreError};

/// Admission control for layer downloads.
///
/// A layer of `s` bytes is admitted once, after evicting what can be
/// evicted, `present + reserved + s <= budget`. The one exception is when no
/// other layer is in use: then everything unpinned has been evicted and the
/// layer is admitted alone, so a single oversized layer cannot stall the run.
/// Together this keeps the store at or below `budget + largest layer`.
pub struct SpaceGate<'s> {
    store: &'s LayerStore,
    budget: u64,
    state: Mutex<GateState>,
    changed: Condvar,
    evicted: AtomicU64,
}

#[derive(Default)]
struct GateState {
    reserved: u64,
    active: usize,
}

pub struct Ticket<'g, 's> {
    gate: &'g SpaceGate<'s>,
    reserved: u64,
}

impl<'s> SpaceGate<'s> {
    pub fn new(store: &'s LayerStore, budget: u64) -> Self {
        SpaceGate {
            store,
            budget,
            state: Mutex::new(GateState::default()),
            changed: Condvar::new(),
            evicted: AtomicU64::new(0),
        }
    }

    /// Blocks until `bytes` more may be written to the store.
    pub fn admit(&self, bytes: u64) -> Result<Ticket<'_, 's>, StoreError> {
        let mut st = self.state.lock().unwrap();
        loop {
            let gone = self.store.make_room(self.budget, st.reserved + bytes)?;
            self.evicted.fetch_add(gone.len() as u64, Ordering::Relaxed);
            let present = self.store.present_bytes();
            if present + st.reserved + bytes <= self.budget || st.active == 0 {
                st.reserved += bytes;
                st.active += 1;
                return Ok(Ticket {
                    gate: self,
                    reserved: bytes,
                });
            }
            st = self.changed.wait(st).unwrap();
        }
    }

    /// Blobs evicted to admit layers so far.
    pub fn evicted(&self) -> u64 {
        self.evicted.load(Ordering::Relaxed)
    }
}

impl Ticket<'_, '_> {
    /// The reserved bytes are now committed to the store (or were never
    /// needed); stop counting them as reserved.
    pub fn committed(&mut self) {
        let mut st = self.gate.state.lock().unwrap();
        st.reserved -= self.reserved;
        self.reserved = 0;
        self.gate.changed.notify_all();
    }
}

impl Drop for Ticket<'_, '_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().unwrap();
        st.reserved -= self.reserved;
        st.active -= 1;
        self.gate.changed.notify_all();
    }
}
