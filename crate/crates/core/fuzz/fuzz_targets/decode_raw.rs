#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(raw) = ksod::pipeline::container::decode_raw(data) {
        let again = ksod::pipeline::container::encode_raw(&raw.metadata, &raw.payload).unwrap();
        let back = ksod::pipeline::container::decode_raw(&again).unwrap();
        assert_eq!(back.payload.len(), raw.payload.len());
    }
});
