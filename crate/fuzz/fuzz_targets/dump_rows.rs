#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = fedsynth::hfmds::parse_dump_csv(text) {
        for r in &rows {
            assert!(r.input.iter().all(|v| v.is_finite()));
        }
    }
});
