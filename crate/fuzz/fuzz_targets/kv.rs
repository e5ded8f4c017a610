#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::kv::KvDoc;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = KvDoc::parse(text) {
        let out = doc.to_text("fuzz");
        let again = KvDoc::parse(&out).expect("re-encoded document parses");
        assert_eq!(again.to_text("fuzz"), out);
    }
});
