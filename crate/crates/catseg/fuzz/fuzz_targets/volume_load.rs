#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = catseg::volfile::decode_image(data);
    let _ = catseg::volfile::decode_labels(data);
});
