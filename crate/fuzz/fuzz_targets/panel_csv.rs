#![no_main]

use dsar::io::{format_panel, parse_panel_str};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let Ok(panel) = parse_panel_str(&text) else { return };
    let again = parse_panel_str(&format_panel(&panel)).expect("formatted panel parses");
    assert_eq!(again.y, panel.y);
});
