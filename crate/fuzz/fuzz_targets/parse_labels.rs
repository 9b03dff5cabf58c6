#![no_main]

use libfuzzer_sys::fuzz_target;
use sada_core::toy_train::{confusion_matrix, f1_scores, parse_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(labels) = parse_labels(text) {
        let classes = labels.iter().max().map_or(1, |m| m.saturating_add(1));
        if classes <= 1024 {
            if let Ok(c) = confusion_matrix(&labels, &labels, classes) {
                if let Ok(s) = f1_scores(&c) {
                    assert!((0.0..=1.0).contains(&s.f1_micro));
                }
            }
        }
    }
});
