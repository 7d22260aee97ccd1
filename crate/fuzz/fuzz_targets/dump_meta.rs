#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = fedsynth::hfmds::DumpMeta::parse(text) {
        assert_eq!(meta.initial_losses.len(), meta.samples);
        assert!(!meta.rows_file.contains('/'));
    }
});
