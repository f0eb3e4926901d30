#![no_main]

use libfuzzer_sys::fuzz_target;
use misscon::records::{read_records, write_records};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records(data) {
        let mut buf = Vec::new();
        write_records(&records, &mut buf).expect("write");
        assert_eq!(read_records(buf.as_slice()).expect("re-read"), records);
    }
});
