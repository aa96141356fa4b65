#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use maskcot::model::FrameShape;
use maskcot::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = TrainConfig::from_json(text, Path::new("fuzz")) else {
        return;
    };
    let frame = FrameShape {
        channels: 1,
        classes: cfg.model.encoder.classes,
        height: 16,
        width: 16,
    };
    let _ = cfg.model.validate(&frame);
    let _ = cfg.hash();
});
