//! The P6 decoder must never panic, and anything it accepts must survive
//! a canonical re-encode/re-decode round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = antn::io::pnm::decode_ppm(data) {
        let bytes = antn::io::pnm::encode_ppm(&image).expect("decoded image re-encodes");
        let again = antn::io::pnm::decode_ppm(&bytes).expect("canonical form decodes");
        assert_eq!(again.data(), image.data());
        assert_eq!(antn::io::pnm::encode_ppm(&again).expect("re-encodes"), bytes);
    }
});
