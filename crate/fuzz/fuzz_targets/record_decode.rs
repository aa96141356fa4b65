#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskcot::data::format::{decode_grid, decode_mask, encode_grid, encode_mask};

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = decode_grid(data, Path::new("fuzz")) {
        assert_eq!(encode_grid(&grid), data);
    }
    if let Ok(mask) = decode_mask(data, Path::new("fuzz")) {
        assert_eq!(encode_mask(&mask), data);
    }
});
