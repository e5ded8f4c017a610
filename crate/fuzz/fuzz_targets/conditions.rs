#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::conditions::{decode_conditions, encode_conditions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = decode_conditions(text) {
        let out = encode_conditions(&c);
        let again = decode_conditions(&out).expect("re-encoded manifest decodes");
        assert_eq!(encode_conditions(&again), out);
    }
});
