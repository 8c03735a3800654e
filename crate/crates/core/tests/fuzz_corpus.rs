//! Replays the checked-in fuzz corpus through the decoder entry points.

use std::fs;
use std::path::PathBuf;

use ckequant_core::config::{parse_override, ExperimentConfig};
use ckequant_core::hermitian::{parse_gram_list, GramForm};
use ckequant_core::obstructions::{format_rational, parse_rational};

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty());
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (name, s) in seeds("parse_config") {
        if let Ok(cfg) = ExperimentConfig::from_json(&s) {
            accepted += 1;
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json_pretty()).unwrap(), cfg, "{name}");
        } else {
            assert_eq!(name, "unknown_field.json");
        }
    }
    assert_eq!(accepted, 4);
}

#[test]
fn gram_seeds() {
    for (name, s) in seeds("parse_gram_json") {
        let single = GramForm::from_json(&s);
        let list = parse_gram_list(&s);
        match name.as_str() {
            "not_hermitian.json" => assert!(single.is_err() && list.is_err()),
            "list.json" => assert_eq!(list.unwrap().len(), 2),
            _ => {
                let g = single.unwrap();
                assert_eq!(GramForm::from_json(&g.to_json()).unwrap(), g);
            }
        }
    }
}

#[test]
fn override_seeds() {
    for (name, s) in seeds("parse_override") {
        let parsed = parse_override(&s);
        if name == "empty_segment.txt" {
            assert!(parsed.is_err());
            continue;
        }
        parsed.unwrap();
        ExperimentConfig::p1(4).with_overrides(&[s.as_str()]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn rational_seeds() {
    for (name, s) in seeds("parse_rational") {
        match parse_rational(&s) {
            Ok(r) => assert_eq!(parse_rational(&format_rational(&r)).unwrap(), r),
            Err(_) => assert_eq!(name, "negative_denominator.txt"),
        }
    }
}
