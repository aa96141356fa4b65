#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskcot::data::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = DatasetManifest::from_json(text, Path::new("fuzz")) {
            // accepted manifests address only their own files
            for w in &m.windows {
                assert!(w.file < m.files.len());
                assert!(w.start + m.window_length <= m.files[w.file].frames);
            }
        }
    }
});
