#![no_main]

use libfuzzer_sys::fuzz_target;
use unitok::data::Vocab;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocab::parse(text) {
        assert_eq!(Vocab::parse(&v.to_text()).expect("round trip"), v);
        let ids = v.encode("a red circle");
        assert!(ids.iter().all(|&i| i < v.len()));
    }
});
