//! Pre-reserved pool of sandbox ports.

use std::collections::{HashMap, VecDeque};

use parking_lot::Mutex;

#[derive(Debug)]
pub struct PortPool {
    inner: Mutex<Pool>,
    size: usize,
}

#[derive(Debug)]
struct Pool {
    free: VecDeque<u16>,
    leased: HashMap<u64, u16>,
}

impl PortPool {
    /// Every port in `lo..=hi`.
    pub fn new(lo: u16, hi: u16) -> Self {
        let free: VecDeque<u16> = (lo..=hi).collect();
        let size = free.len();
        Self {
            inner: Mutex::new(Pool {
                free,
                leased: HashMap::new(),
            }),
            size,
        }
    }

    /// Leases a port to `holder`; returns the existing lease if it has one.
    /// Released ports go to the back so they are reused last.
    pub fn lease(&self, holder: u64) -> Option<u16> {
        let mut p = self.inner.lock();
        if let Some(port) = p.leased.get(&holder) {
            return Some(*port);
        }
        let port = p.free.pop_front()?;
        p.leased.insert(holder, port);
        Some(port)
    }

    pub fn release(&self, holder: u64) -> Option<u16> {
        let mut p = self.inner.lock();
        let port = p.leased.remove(&holder)?;
        p.free.push_back(port);
        Some(port)
    }

    pub fn port_of(&self, holder: u64) -> Option<u16> {
        self.inner.lock().leased.get(&holder).copied()
    }

    pub fn free(&self) -> usize {
        self.inner.lock().free.len()
    }

    pub fn leased(&self) -> usize {
        self.inner.lock().leased.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }
}
