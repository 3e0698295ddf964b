#![no_main]

use dsar::weights::{parse_weights, WeightFormat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(w) = parse_weights(&text, WeightFormat::DenseCsv, None) {
        assert!(w.is_square());
        assert!((0..w.nrows()).all(|i| w[(i, i)] == 0.0));
    }
});
