#![no_main]

use ckequant_core::hermitian::{parse_gram_list, GramForm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(g) = GramForm::from_json(s) {
        let back = GramForm::from_json(&g.to_json()).expect("re-encoded Gram decodes");
        assert_eq!(back, g);
    }
    let _ = parse_gram_list(s);
});
