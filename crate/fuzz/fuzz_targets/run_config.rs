#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::config::RunConfig;

fuzz_target!(|data: &str| {
    let _ = RunConfig::parse(data);
});
