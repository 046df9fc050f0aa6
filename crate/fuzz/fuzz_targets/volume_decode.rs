//! Input layout: sidecar text, a NUL byte, then the raw voxel bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;
use voxrf::voxelgrid::decode_volume;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(meta) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let raw = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(grid) = decode_volume(meta, raw) {
        assert_eq!(grid.as_bytes(), raw);
        assert!(grid.porosity() >= 0.0 && grid.porosity() <= 1.0);
        assert_eq!(decode_volume(&grid.meta().to_text(), raw).unwrap(), grid);
    }
});
