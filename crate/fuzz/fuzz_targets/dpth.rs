#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::raster::{decode_dpth, encode_dpth};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_dpth(data) {
        let bytes = encode_dpth(&img);
        assert_eq!(encode_dpth(&decode_dpth(&bytes).expect("re-encoded image decodes")), bytes);
    }
});
