#![no_main]
use libfuzzer_sys::fuzz_target;
use promptkd::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&tensors)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), tensors.len());
    }
});
