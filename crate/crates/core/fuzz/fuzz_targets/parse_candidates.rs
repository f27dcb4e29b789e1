#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    for c in ksod::identifier::parse_candidates(data) {
        assert!(!c.name.is_empty());
        assert!(!c.name.contains('\n'));
    }
});
