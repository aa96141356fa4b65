#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskcot::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data, Path::new("fuzz")) {
        // anything accepted must re-encode to a container that decodes the same
        let again = Checkpoint::decode(&ckpt.encode(), Path::new("fuzz")).expect("re-encoded checkpoint decodes");
        assert_eq!(again, ckpt);
    }
});
