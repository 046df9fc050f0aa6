//! Threshold and mean fields share the sentinel-aware JSON layout.

#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::identify::{MeanField, ThresholdField};

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(t) = ThresholdField::from_json(&text) {
        assert_eq!(ThresholdField::from_json(&t.to_json()).unwrap(), t);
        let m = t.implied_mean();
        assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(m) = MeanField::from_json(&text) {
        assert_eq!(MeanField::from_json(&m.to_json()).unwrap(), m);
    }
});
