//! Shared workloads for the criterion benches.

use microsim_core::engine::{EventKind, HandlerTable, Kernel, SimEvent};
use microsim_core::scenarios::{capacity_case, synthesize};
use microsim_core::Simulation;

/// Self-rescheduling event chains: `fanout` independent streams, each
/// rescheduling itself after a random delay until `total` events have run.
pub fn kernel_churn(total: u64, fanout: usize, seed: u64) -> u64 {
    use rand::Rng;

    struct Count {
        left: u64,
    }
    fn step(s: &mut Count, ev: SimEvent<u64>, k: &mut Kernel<u64>) {
        if s.left == 0 {
            k.stop();
            return;
        }
        s.left -= 1;
        let d = k.rng().gen_range(0.0..1.0);
        k.schedule_in(d, EventKind::Dispatch, ev.payload);
    }

    let mut kernel = Kernel::new(seed);
    let mut table = HandlerTable::new(Count { left: total });
    table.register(EventKind::Dispatch, step);
    for i in 0..fanout {
        kernel.schedule_in(0.0, EventKind::Dispatch, i as u64);
    }
    kernel.run(&mut table, None).processed
}

/// Run one capacity case end to end and return the processed event count.
pub fn run_case(id: &str, seed: u64) -> u64 {
    let case = capacity_case(id).unwrap_or_else(|| panic!("unknown case {id}"));
    let sim = Simulation::new(&synthesize(&case, seed)).expect("synthetic cases are valid");
    sim.run().expect("synthetic cases run clean").summary.processed
}
