//! The config parser must never panic on arbitrary text, and any file it
//! accepts must serialize to a canonical form that parses back equal.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = antn::io::config::RunConfig::parse_str(text) {
        let canonical = cfg.serialize();
        let again = antn::io::config::RunConfig::parse_str(&canonical)
            .expect("canonical form parses");
        assert_eq!(again, cfg);
    }
});
