#![no_main]

use decoupled_rec::softlabel::parse_targets;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = parse_targets(data) {
        for q in set.targets.values() {
            assert!(q.q_y() > 0.0);
        }
    }
});
