#![no_main]

use libfuzzer_sys::fuzz_target;
use ksod::datahub::{parse_dataset, DatasetFormat};

// First byte picks the format.
fuzz_target!(|data: &[u8]| {
    let Some((&sel, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let format = if sel & 1 == 0 { DatasetFormat::Jsonl } else { DatasetFormat::Tsv };
    if let Ok(ds) = parse_dataset("fuzz", text, format, None) {
        assert!(ds.examples.iter().all(|e| e.label < ds.num_classes()));
    }
});
