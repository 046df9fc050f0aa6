#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::voxelgrid::VolumeMeta;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(meta) = VolumeMeta::parse(text) {
        let again = VolumeMeta::parse(&meta.to_text()).expect("rendered metadata parses");
        assert_eq!(again, meta);
    }
});
