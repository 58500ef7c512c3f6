#![no_main]

use acanet_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

// Accepted configs echo to a fixed point.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = RunConfig::parse(text) {
            let echoed = file.config.to_toml().unwrap();
            let again = RunConfig::parse(&echoed).unwrap().config.to_toml().unwrap();
            assert_eq!(again, echoed);
        }
    }
});
