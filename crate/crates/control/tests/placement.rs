use baton_control::placer::{place, Candidate};
use proptest::prelude::*;

fn candidate() -> impl Strategy<Value = Candidate> {
    (1u32..8_000, 1u32..16_384, 0u32..=100, 0u32..=100).prop_map(|(cpu, mem, cu, mu)| Candidate {
        index: 0,
        cpu_capacity: cpu,
        cpu_committed: cpu / 100 * cu,
        mem_capacity: mem,
        mem_committed: mem / 100 * mu,
    })
}

fn cluster() -> impl Strategy<Value = Vec<Candidate>> {
    prop::collection::vec(candidate(), 0..12).prop_map(|mut v| {
        for (i, c) in v.iter_mut().enumerate() {
            c.index = i as u16;
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn never_overcommits_and_picks_the_best(workers in cluster(), cpu in 0u32..2_000, mem in 0u32..4_096) {
        match place(cpu, mem, &workers) {
            Some(i) => {
                let w = workers[i as usize];
                prop_assert!(w.cpu_committed as u64 + cpu as u64 <= w.cpu_capacity as u64);
                prop_assert!(w.mem_committed as u64 + mem as u64 <= w.mem_capacity as u64);
                let s = w.score(cpu, mem);
                for other in workers.iter().filter(|o| o.fits(cpu, mem)) {
                    let so = other.score(cpu, mem);
                    prop_assert!(so < s || (so == s && other.index >= w.index));
                }
            }
            None => prop_assert!(workers.iter().all(|w| !w.fits(cpu, mem))),
        }
    }

    #[test]
    fn filling_a_cluster_stays_within_capacity(mut workers in cluster(), cpu in 1u32..1_000, mem in 1u32..2_048) {
        let mut placed = 0;
        while let Some(i) = place(cpu, mem, &workers) {
            let w = &mut workers[i as usize];
            w.cpu_committed += cpu;
            w.mem_committed += mem;
            placed += 1;
            prop_assert!(placed < 100_000);
        }
        for w in &workers {
            prop_assert!(w.cpu_committed <= w.cpu_capacity && w.mem_committed <= w.mem_capacity);
        }
    }
}
