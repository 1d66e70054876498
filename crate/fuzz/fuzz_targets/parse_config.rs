#![no_main]
use libfuzzer_sys::fuzz_target;
use promptkd::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::resolve(Some(s), &[]) {
            let again = ExperimentConfig::resolve(Some(&cfg.to_text()), &[]).expect("canonical text parses");
            assert_eq!(again.hash(), cfg.hash());
        }
    }
});
