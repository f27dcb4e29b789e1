#![no_main]

use libfuzzer_sys::fuzz_target;
use ksod::pipeline::container::{decode_vector, encode_vector};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_vector(data) {
        let _ = v.dense();
        let bytes = encode_vector(&v).expect("decoded vector re-encodes");
        let again = encode_vector(&decode_vector(&bytes).unwrap()).unwrap();
        assert_eq!(again, bytes);
    }
});
