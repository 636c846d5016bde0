//! Pipeline configs arrive as user-authored JSON; parsing plus `validate`
//! must reject bad input with an error rather than panic.
#![no_main]

use libfuzzer_sys::fuzz_target;
use longreg::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<PipelineConfig>(text) {
        let _ = cfg.validate();
        // A config that parses must also survive re-serialization.
        let echo = serde_json::to_string(&cfg).expect("parsed config always serializes");
        let back: PipelineConfig =
            serde_json::from_str(&echo).expect("serialized config always parses");
        let _ = back.validate();
    }
});
