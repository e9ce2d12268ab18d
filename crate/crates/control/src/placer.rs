//! Least-allocated placement balancing CPU and memory.

/// A worker as seen by the placer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub index: u16,
    pub cpu_capacity: u32,
    pub cpu_committed: u32,
    pub mem_capacity: u32,
    pub mem_committed: u32,
}

impl Candidate {
    pub fn fits(&self, cpu: u32, mem: u32) -> bool {
        u64::from(self.cpu_committed) + u64::from(cpu) <= u64::from(self.cpu_capacity)
            && u64::from(self.mem_committed) + u64::from(mem) <= u64::from(self.mem_capacity)
    }

    /// Mean free fraction of CPU and memory after committing the request.
    pub fn score(&self, cpu: u32, mem: u32) -> f64 {
        let free = |cap: u32, used: u32, req: u32| {
            if cap == 0 {
                0.0
            } else {
                (f64::from(cap) - f64::from(used) - f64::from(req)) / f64::from(cap)
            }
        };
        0.5 * free(self.cpu_capacity, self.cpu_committed, cpu)
            + 0.5 * free(self.mem_capacity, self.mem_committed, mem)
    }
}

/// Picks the feasible candidate with the highest score; ties go to the
/// lowest index. `None` when nothing fits.
pub fn place(cpu: u32, mem: u32, candidates: &[Candidate]) -> Option<u16> {
    let mut best: Option<(f64, u16)> = None;
    for c in candidates.iter().filter(|c| c.fits(cpu, mem)) {
        let s = c.score(cpu, mem);
        best = match best {
            Some((bs, bi)) if bs > s || (bs == s && bi < c.index) => Some((bs, bi)),
            _ => Some((s, c.index)),
        };
    }
    best.map(|(_, i)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worker(index: u16, cpu_used: u32, mem_used: u32) -> Candidate {
        Candidate {
            index,
            cpu_capacity: 1000,
            cpu_committed: cpu_used,
            mem_capacity: 1000,
            mem_committed: mem_used,
        }
    }

    #[test]
    fn prefers_least_allocated() {
        let a = worker(0, 200, 200);
        let b = worker(1, 500, 500);
        // A: 0.5*(700/1000) + 0.5*(700/1000) = 0.7; B: 0.4.
        assert!((a.score(100, 100) - 0.7).abs() < 1e-12);
        assert!((b.score(100, 100) - 0.4).abs() < 1e-12);
        assert_eq!(place(100, 100, &[b, a]), Some(0));
    }

    #[test]
    fn single_full_and_tied() {
        assert_eq!(place(100, 100, &[worker(4, 0, 0)]), Some(4));
        assert_eq!(
            place(100, 100, &[worker(0, 950, 0), worker(1, 0, 950)]),
            None
        );
        assert_eq!(
            place(100, 100, &[worker(3, 10, 10), worker(2, 10, 10)]),
            Some(2)
        );
    }
}
