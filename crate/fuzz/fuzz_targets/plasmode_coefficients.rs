#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::plasmode::PlasmodeModels;

fuzz_target!(|data: &str| {
    let _ = PlasmodeModels::parse(data);
});
