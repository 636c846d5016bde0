//! The NIfTI reader is the only place the library decodes untrusted bytes,
//! including a gzip layer with a decompression cap. Beyond not crashing,
//! anything that parses must survive a serialize/reparse round trip intact.
#![no_main]

use libfuzzer_sys::fuzz_target;
use longreg::nifti::{
    field_to_bytes, mask_to_bytes, read_nifti_bytes, volume_to_bytes, LoadedNifti,
};

fuzz_target!(|data: &[u8]| {
    let Ok(parsed) = read_nifti_bytes(data) else {
        return;
    };
    let bytes = match &parsed {
        LoadedNifti::Volume(v) => volume_to_bytes(v),
        LoadedNifti::Mask(m) => mask_to_bytes(m),
        LoadedNifti::Field(f) => field_to_bytes(f),
    }
    .expect("a loaded object always serializes");
    let reparsed = read_nifti_bytes(&bytes).expect("serialized output always parses");
    match (&parsed, &reparsed) {
        (LoadedNifti::Volume(a), LoadedNifti::Volume(b)) => assert_eq!(a, b),
        (LoadedNifti::Mask(a), LoadedNifti::Mask(b)) => assert_eq!(a, b),
        (LoadedNifti::Field(a), LoadedNifti::Field(b)) => assert_eq!(a, b),
        _ => panic!("round trip changed the payload kind"),
    }
});
