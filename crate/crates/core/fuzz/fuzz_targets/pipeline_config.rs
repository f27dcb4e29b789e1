#![no_main]

use libfuzzer_sys::fuzz_target;
use ksod::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<PipelineConfig>(data) {
        let _ = cfg.validate();
    }
});
