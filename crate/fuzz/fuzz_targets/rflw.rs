#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::flow::{decode_field, encode_field};

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = decode_field(data) {
        let bytes = encode_field(&f);
        assert_eq!(encode_field(&decode_field(&bytes).expect("re-encoded checkpoint decodes")), bytes);
    }
});
