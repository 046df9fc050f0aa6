#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(cfg) = PipelineConfig::parse(&text) {
        let again = PipelineConfig::parse(&cfg.to_toml()).expect("serialized config parses");
        assert_eq!(again, cfg);
    }
});
