#![no_main]

use decoupled_rec::dataio::{parse_idmap, write_idmap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((users, items)) = parse_idmap(data) {
        let mut buf = Vec::new();
        write_idmap(&mut buf, &users, &items).unwrap();
        assert_eq!(parse_idmap(buf.as_slice()).unwrap(), (users, items));
    }
});
