#![no_main]

use libfuzzer_sys::fuzz_target;
use sada_core::matrix_csv::{parse_matrix_csv, write_matrix_csv};
use sada_core::stain_separation::{DensityMaps, StainBasis};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_matrix_csv(text) {
        let again = parse_matrix_csv(&write_matrix_csv(&m)).unwrap();
        assert_eq!(again.dim(), m.dim());
    }
    let _ = StainBasis::from_csv(text);
    let _ = DensityMaps::from_csv(text);
});
