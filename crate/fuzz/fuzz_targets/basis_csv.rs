#![no_main]

use dsar::io::{basis_from_series, format_series, parse_series_str};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let Ok(table) = parse_series_str(&text) else { return };
    assert_eq!(parse_series_str(&format_series(&table)).ok().as_ref(), Some(&table));
    for constants in [&[][..], &[true], &[false, true], &[true, true]] {
        let _ = basis_from_series(&table, constants);
    }
});
