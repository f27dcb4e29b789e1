#![no_main]

use libfuzzer_sys::fuzz_target;
use ksod::pipeline::export::{parse_embeddings, ExportFormat};
use ksod::verifier::{best_pair_silhouette, silhouette};

fuzz_target!(|data: &[u8]| {
    let Some((&sel, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let format = if sel & 1 == 0 { ExportFormat::Tsv } else { ExportFormat::Jsonl };
    if let Ok(set) = parse_embeddings(text, format) {
        if set.len() <= 64 {
            if let Ok(s) = silhouette(&set) {
                assert!(s.is_nan() || (-1.0..=1.0).contains(&s));
            }
            let _ = best_pair_silhouette(&set);
        }
    }
});
