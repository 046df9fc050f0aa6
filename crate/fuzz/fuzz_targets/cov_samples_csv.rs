//! First two bytes pick the axis extent and cell count; the rest is CSV.

#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::identify::CovSampleSet;
use voxrf::Axis;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let extent = usize::from(data[0]);
    let cells = usize::from(data[1]);
    let text = String::from_utf8_lossy(&data[2..]);
    if let Ok(set) = CovSampleSet::read_csv(Axis::X, extent, cells, &text) {
        assert!(set.samples.iter().all(|s| s.lag >= 1 && s.lag <= set.n_lags));
    }
});
