#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = ksod::pipeline::container::decode_backbone(data) {
        // a decoded backbone must be usable
        let _ = model.forward(&[0], None);
    }
});
