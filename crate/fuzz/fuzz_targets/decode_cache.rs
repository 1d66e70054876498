#![no_main]
use libfuzzer_sys::fuzz_target;
use promptkd::class_vectors::{decode_cache, encode_cache};

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = decode_cache(data) {
        assert_eq!(encode_cache(&table), data);
    }
});
