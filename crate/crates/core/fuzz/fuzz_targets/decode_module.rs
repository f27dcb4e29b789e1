#![no_main]

use libfuzzer_sys::fuzz_target;
use ksod::pipeline::container::{decode_module, encode_module};

// Anything that decodes must re-encode to a fixed point.
fuzz_target!(|data: &[u8]| {
    if let Ok(module) = decode_module(data) {
        let bytes = encode_module(&module).expect("decoded module re-encodes");
        let again = encode_module(&decode_module(&bytes).unwrap()).unwrap();
        assert_eq!(again, bytes);
    }
});
