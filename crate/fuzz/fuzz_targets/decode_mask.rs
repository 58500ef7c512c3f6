#![no_main]

use acanet::data::{encode_mask, mask_to_png};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = encode_mask(data) {
        assert_eq!(encode_mask(&mask_to_png(&mask)).unwrap(), mask);
    }
});
