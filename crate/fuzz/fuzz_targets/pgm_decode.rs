//! The P5 decoder must never panic for any class bound, and accepted
//! label maps must round trip bit-exactly.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // A tight class bound exercises the label-range rejection path.
    let _ = antn::io::pnm::decode_pgm(data, 4);
    if let Ok(labels) = antn::io::pnm::decode_pgm(data, 256) {
        let bytes = antn::io::pnm::encode_pgm(&labels);
        let again = antn::io::pnm::decode_pgm(&bytes, 256).expect("canonical form decodes");
        assert_eq!(again.data(), labels.data());
    }
});
