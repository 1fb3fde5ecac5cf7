#![no_main]

use libfuzzer_sys::fuzz_target;
use unitok::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        let again = TrainConfig::parse(&cfg.to_text()).expect("canonical text parses");
        assert_eq!(again.to_text(), cfg.to_text());
    }
});
