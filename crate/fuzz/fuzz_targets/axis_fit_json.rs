#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::identify::AxisFit;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(fit) = AxisFit::from_json(&text) {
        let _ = fit.smoothness_param();
        let again = AxisFit::from_json(&fit.to_json()).expect("rendered fit parses");
        assert_eq!(again.length, fit.length);
        assert_eq!(again.smoothness, fit.smoothness);
    }
});
