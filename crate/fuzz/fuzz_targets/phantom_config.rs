//! Phantom configs pair a synthetic scene description with an analytic
//! deformation; both come from user JSON and validate after parsing.
#![no_main]

use libfuzzer_sys::fuzz_target;
use longreg::pipeline::PhantomCmdConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<PhantomCmdConfig>(text) {
        let _ = cfg.phantom.validate();
        let _ = cfg.deformation.validate();
    }
});
