#![no_main]

use fedsynth::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = Dataset::from_csv_str(text, None) {
        let again = Dataset::from_csv_str(&ds.to_csv_string(), Some(ds.classes())).expect("re-parse of written csv");
        assert_eq!(again.labels(), ds.labels());
    }
});
