#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskcot_cli::render::RenderSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = RenderSpec::from_json(text, Path::new("fuzz")) {
            assert!(!spec.rows.is_empty() && spec.timesteps > 0);
            assert!(spec.ranges.iter().all(|[lo, hi]| lo < hi));
        }
    }
});
