#![no_main]

use fracmet_core::io::{snapshot_from_json, snapshot_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((t, state)) = snapshot_from_json(text, 4) {
        let (t2, back) = snapshot_from_json(&snapshot_to_json(t, &state).unwrap(), 4).unwrap();
        assert_eq!(t2, t);
        assert_eq!(back, state);
    }
});
