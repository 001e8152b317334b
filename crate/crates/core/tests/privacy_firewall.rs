//! Nothing row-level may leave a node: the wire format carries only the
//! documented fields, and distinctive raw values never appear in it.

use dp_linreg::harness::{node_emit, write_ndjson, EmitOptions};
use dp_linreg::model::Dataset;
use dp_linreg::privacy::{DataBounds, PrivacyBudget};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CANARIES: [f64; 3] = [0.123456789012, -0.987654321098, 0.555444333222];

fn canary_shard() -> Dataset {
    let n = 30;
    let x = DMatrix::from_fn(n, 2, |i, j| CANARIES[(i + j) % 3] * (1.0 + i as f64 * 1e-3));
    let y = DVector::from_fn(n, |i, _| CANARIES[i % 3]);
    Dataset::new(x, y).unwrap()
}

/// Agreed before any data are seen; bounds derived from the shard would
/// themselves reveal its extreme values.
fn public_bounds() -> DataBounds {
    DataBounds::new(2.0, 1.0).unwrap()
}

fn digits(v: f64) -> String {
    format!("{:.9}", v.abs())[2..].to_string()
}

#[test]
fn wire_format_has_only_documented_fields_and_no_raw_values() {
    let data = canary_shard();
    let bounds = public_bounds();
    let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
    for include_u in [false, true] {
        let opts = EmitOptions { include_u, ..EmitOptions::default() };
        let msg = node_emit("canary", &data, &bounds, &budget, opts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut buf = Vec::new();
        write_ndjson(&[msg], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        let value: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut expected = vec!["bounds", "budget", "d", "n_rows", "node_id", "s_hat", "schema_version", "z_hat"];
        if include_u {
            expected.push("u_hat");
        }
        expected.sort_unstable();
        assert_eq!(keys, expected);

        for c in CANARIES {
            assert!(!text.contains(&digits(c)), "raw value {c} leaked");
        }
        // s_hat carries d(d+1)/2 numbers and z_hat d: no room for rows.
        assert_eq!(value["s_hat"].as_array().unwrap().len(), 3);
        assert_eq!(value["z_hat"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn released_statistics_are_actually_perturbed() {
    let data = canary_shard();
    let bounds = public_bounds();
    let budget = PrivacyBudget::new(1.0, 1e-6).unwrap();
    let a = node_emit("a", &data, &bounds, &budget, EmitOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = node_emit("a", &data, &bounds, &budget, EmitOptions::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(a.s_hat, b.s_hat);
    assert_ne!(a.z_hat, b.z_hat);
    let exact = data.x().transpose() * data.y();
    assert!((DVector::from_vec(a.z_hat.clone()) - exact).norm() > 1e-3);
}
