//! Walks one message cycle under the default 3-2-2-2 retry protocol for a
//! few pickup patterns.
//!
//!     cargo run --example retry_protocol

use callslot::domain::{SlotId, UserId};
use callslot::scheduler::{MessageCycle, RetryProtocol};

fn main() {
    let protocol = RetryProtocol::default();
    // the attempt (counted across the cycle) that gets picked up, if any
    for pickup in [Some(0), Some(2), Some(5), None] {
        let mut cycle = MessageCycle::new(UserId(1), 14);
        let mut n = 0;
        while let Some(day) = cycle.next_day(&protocol) {
            let slot = SlotId::from_index(day as usize % 7);
            cycle.run_day(slot, &protocol, |_| {
                n += 1;
                Some(n - 1) == pickup
            });
        }
        let plan = cycle.into_plan(&protocol);
        println!("pickup at attempt {pickup:?}:");
        for a in &plan.attempts {
            println!(
                "  day {:>2} slot {} retry {} {}",
                a.day,
                a.slot.get(),
                a.retry,
                if a.picked { "picked" } else { "missed" }
            );
        }
        println!("  next message on day {}\n", plan.next_message_day);
    }
}
