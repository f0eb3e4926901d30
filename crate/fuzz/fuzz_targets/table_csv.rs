#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::plasmode::cohort_schema;
use misscon::table::{read_table, Schema};

fuzz_target!(|data: &[u8]| {
    let _ = read_table(data, &cohort_schema());
    let schema = Schema::parse("y:binary,x:binary,z:continuous,g:categorical(a|b|c)").unwrap();
    let _ = read_table(data, &schema);
});
