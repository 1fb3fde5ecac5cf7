#![no_main]

use libfuzzer_sys::fuzz_target;
use unitok::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        // anything accepted must re-encode to something that decodes the same
        if let Ok(bytes) = ck.to_bytes() {
            let back = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
            assert_eq!(back.entries.len(), ck.entries.len());
        }
        let _ = unitok::model::Tokenizer::from_checkpoint(&ck);
    }
});
