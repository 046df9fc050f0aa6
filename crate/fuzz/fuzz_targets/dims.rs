#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::Dims;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(d) = text.parse::<Dims>() {
        assert_eq!(d.to_string().parse::<Dims>().unwrap(), d);
    }
});
