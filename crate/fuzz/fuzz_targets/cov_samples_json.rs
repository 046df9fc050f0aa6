#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::identify::CovSampleSet;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(set) = CovSampleSet::from_json(&text) {
        let mut csv = Vec::new();
        set.write_csv(&mut csv).expect("csv renders");
        let _ = set.truncated(set.n_lags / 2);
    }
});
