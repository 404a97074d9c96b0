#![no_main]

use fracmet_core::io::{decode_operator, encode_operator, OperatorSidecar};
use libfuzzer_sys::fuzz_target;

// Input: sidecar JSON, a NUL byte, then the binary payload.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let Ok(side) = serde_json::from_slice::<OperatorSidecar>(&data[..split]) else { return };
    if let Ok(op) = decode_operator(&side, &data[split + 1..], 4) {
        let (bytes, side2) = encode_operator(&op).unwrap();
        assert_eq!(side2, side);
        assert_eq!(bytes, &data[split + 1..]);
    }
});
