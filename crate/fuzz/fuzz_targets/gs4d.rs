#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::gaussians::{decode_gs4d, encode_gs4d};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_gs4d(data) {
        let bytes = encode_gs4d(&set);
        let again = decode_gs4d(&bytes).expect("re-encoded set decodes");
        assert_eq!(encode_gs4d(&again), bytes);
    }
});
