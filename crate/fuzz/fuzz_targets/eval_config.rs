//! Eval configs are the smallest JSON surface: two field paths plus an
//! optional mask. Parsing must never panic on arbitrary text.
#![no_main]

use libfuzzer_sys::fuzz_target;
use longreg::pipeline::EvalConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = serde_json::from_str::<EvalConfig>(text);
});
