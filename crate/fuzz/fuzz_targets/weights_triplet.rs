#![no_main]

use dsar::weights::{parse_weights, WeightFormat};
use libfuzzer_sys::fuzz_target;

// First byte picks the dimension so allocations stay small.
fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else { return };
    let d = usize::from(first % 64);
    let text = String::from_utf8_lossy(rest);
    if let Ok(w) = parse_weights(&text, WeightFormat::TripletCsv, Some(d)) {
        assert_eq!(w.shape(), (d, d));
    }
});
