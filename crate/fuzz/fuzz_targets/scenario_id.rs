#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::scenario::Scenario;

fuzz_target!(|data: &str| {
    if let Ok(s) = data.parse::<Scenario>() {
        let again: Scenario = s.id().parse().expect("canonical id parses");
        assert_eq!(s.id(), again.id());
    }
});
