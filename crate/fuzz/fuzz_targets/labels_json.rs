#![no_main]

use libfuzzer_sys::fuzz_target;
use sada_core::stain_clustering::LabelsJson;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = LabelsJson::parse(text) {
        let again = LabelsJson::parse(&serde_json::to_string(&parsed).unwrap()).unwrap();
        assert_eq!(again, parsed);
    }
});
