#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::decoder::{decode_decoder, encode_decoder};

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = decode_decoder(data) {
        let bytes = encode_decoder(&d);
        assert_eq!(encode_decoder(&decode_decoder(&bytes).expect("re-encoded checkpoint decodes")), bytes);
    }
});
