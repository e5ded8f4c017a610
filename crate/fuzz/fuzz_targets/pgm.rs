#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::raster::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        let bytes = encode_pgm(&img);
        assert_eq!(decode_pgm(&bytes).expect("re-encoded image decodes"), img);
    }
});
