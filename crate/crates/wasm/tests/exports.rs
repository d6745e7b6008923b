use serde_json::Value;

use nvlab_wasm::{g2_curve, odmr, odmr_spectrum, rabi, rabi_curve};

#[test]
fn odmr_recovers_the_requested_field() {
    let (curve, b) = odmr(28.0, 0.0, 1).unwrap();
    assert_eq!(curve.x.len(), 171);
    assert!((b - 28.0).abs() < 0.5, "{b} G");
}

#[test]
fn rabi_pi_time_follows_the_drive() {
    for mhz in [5.0, 13.16] {
        let c = rabi(mhz, 100_000, 2).unwrap();
        let pi = c.fit.derived("pi_time").unwrap().value;
        let truth = 1.0 / (2.0 * mhz * 1e6);
        assert!((pi - truth).abs() < 0.03 * truth, "{mhz} MHz: π = {pi}");
    }
}

#[test]
fn exports_return_json() {
    let v: Value = serde_json::from_str(&rabi_curve(13.16, 50_000, 3)).unwrap();
    assert!(v["pi_time"].as_f64().unwrap() > 0.0);
    assert_eq!(v["curve"]["x"].as_array().unwrap().len(), v["curve"]["y_fit"].as_array().unwrap().len());

    let v: Value = serde_json::from_str(&g2_curve(false, 20.0, 1)).unwrap();
    assert!(v["g2_zero"].as_f64().unwrap() < 0.5, "{}", v["g2_zero"]);

    let v: Value = serde_json::from_str(&odmr_spectrum(500.0, 0.0, 1)).unwrap();
    assert!(v["error"].as_str().unwrap().contains("500"));
}
