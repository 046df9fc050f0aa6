#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::mlmc::ensembles_from_records;
use voxrf::qoi::read_records;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(records) = read_records(&text) {
        let _ = ensembles_from_records(&records);
    }
});
