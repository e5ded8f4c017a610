#![no_main]

use libfuzzer_sys::fuzz_target;
use worldsplat::pipeline::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::parse(text) {
        let out = cfg.to_text();
        let again = PipelineConfig::parse(&out).expect("printed config parses");
        assert_eq!(again.to_text(), out);
    }
});
