use serde_json::Value;
use xrecosa_web::{metrics, EchoDemo};

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn metrics_skip_empty_reference_lines() {
    let v = json(&metrics("a b\nc d", "a b\n\t"));
    assert_eq!(v["samples"], 2);
    assert_eq!(v["skipped_references"], 1);
}

#[test]
fn echo_demo_is_seeded_and_modes_parse() {
    for mode in ["x_fusion", "context_only", "sentence_only"] {
        let mut a = EchoDemo::new(7, mode).unwrap();
        let mut b = EchoDemo::new(7, mode).unwrap();
        assert_eq!(a.train(5), b.train(5));
        assert_eq!(a.example(0), b.example(0));
        let v = json(&a.train(1));
        assert_eq!(v["step"], 6);
    }
}
