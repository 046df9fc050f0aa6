#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::mlmc::{normal_intervals, MomentEstimates};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(est) = MomentEstimates::from_json(&text) {
        let _ = normal_intervals(est.mean, est.std);
        let _ = est.to_json();
    }
});
