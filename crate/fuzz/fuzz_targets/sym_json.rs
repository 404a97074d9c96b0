#![no_main]

use fracmet_core::io::{sym_from_json, sym_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = sym_from_json(text, 4) {
        let back = sym_from_json(&sym_to_json(&h).unwrap(), 4).unwrap();
        assert_eq!(back.coeffs(), h.coeffs());
    }
});
