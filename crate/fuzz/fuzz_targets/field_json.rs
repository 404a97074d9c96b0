#![no_main]

use fracmet_core::io::{field_from_json, field_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(f) = field_from_json(text, 4) {
        let back = field_from_json(&field_to_json(&f).unwrap(), 4).unwrap();
        assert_eq!(back.values(), f.values());
    }
});
