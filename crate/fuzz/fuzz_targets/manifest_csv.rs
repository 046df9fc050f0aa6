#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::generate::{read_manifest, write_manifest};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(rows) = read_manifest(&text) {
        let mut out = Vec::new();
        write_manifest(&rows, &mut out).expect("manifest renders");
        let again = read_manifest(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(again.len(), rows.len());
    }
});
