#![no_main]

use decoupled_rec::dataio::{parse_interactions, LoadOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for opts in [LoadOptions::default(), LoadOptions::movielens_100k()] {
        if let Ok(log) = parse_interactions(data, &opts) {
            assert!(log.events.iter().all(|e| e.user < log.user_count() && e.item < log.item_count()));
        }
    }
});
