#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((head, names)) = ksod::pipeline::container::decode_head(data) {
        assert_eq!(head.num_classes(), names.len());
    }
});
