#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = catseg::checkpoint::validate_checkpoint_bytes(data);
});
