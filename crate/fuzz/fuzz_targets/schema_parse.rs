#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::table::Schema;

fuzz_target!(|data: &str| {
    let _ = Schema::parse(data);
});
