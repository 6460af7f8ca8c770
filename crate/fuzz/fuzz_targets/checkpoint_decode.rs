//! The checkpoint reader must never panic or over-allocate on hostile
//! bytes, and anything it accepts must survive a save/load cycle.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = antn::io::checkpoint::load_model(data) {
        let bytes = antn::io::checkpoint::save_model(&model);
        let again = antn::io::checkpoint::load_model(&bytes).expect("own output loads");
        assert_eq!(antn::io::checkpoint::save_model(&again), bytes);
    }
});
