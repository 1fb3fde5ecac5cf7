#![no_main]

use libfuzzer_sys::fuzz_target;
use unitok::data::parse_captions_tsv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_captions_tsv(text) {
        let lines = text.lines().count();
        for (line, path, caption) in rows {
            assert!(line >= 1 && line <= lines);
            assert!(!path.is_empty() && !caption.trim().is_empty());
        }
    }
});
