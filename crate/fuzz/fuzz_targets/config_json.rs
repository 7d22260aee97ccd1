#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = fedsynth::parse_config(text) {
        // anything accepted must survive its own serialization
        let again = fedsynth::parse_config(&cfg.to_json()).expect("re-parse of serialized config");
        assert_eq!(again, cfg);
    }
});
