#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::formula::Formula;

fuzz_target!(|data: &str| {
    if let Ok(f) = Formula::parse(data) {
        let again = Formula::parse(&f.to_string()).expect("printed formula parses");
        assert_eq!(f, again);
    }
});
