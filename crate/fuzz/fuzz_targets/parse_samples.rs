#![no_main]

use decoupled_rec::dataio::{parse_samples, write_samples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = parse_samples(data) {
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        assert_eq!(parse_samples(buf.as_slice()).unwrap(), samples);
    }
});
