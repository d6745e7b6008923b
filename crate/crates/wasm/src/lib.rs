//! Three bench experiments for the browser. Each export takes plain numbers
//! and returns a JSON string: `{x, y, error, fit, ...}` or `{error: msg}`.

use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;

use nvlab_core::analysis::{fit, FitResult, ModelKind};
use nvlab_core::apparatus::{to_nv_frame, Apparatus, ApparatusConfig, MagnetState, Preset};
use nvlab_core::experiment::{run_experiment, Dataset, Experiment, ExperimentSpec};
use nvlab_core::spin::{field_from_splitting, transition_frequencies, SpinParams, GAMMA_E, GAUSS};

#[derive(Debug, Serialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub error: Vec<f64>,
    /// Fitted model on the same grid.
    pub y_fit: Vec<f64>,
    pub fit: FitResult,
    /// Simulated acquisition time, s.
    pub simulated: f64,
}

fn measure(config: ApparatusConfig, spec: ExperimentSpec, model: ModelKind) -> Result<Curve, String> {
    let app = Apparatus::new(config, 1).map_err(|e| e.to_string())?;
    let mut s = app.session().map_err(|e| e.to_string())?;
    let d: Dataset = run_experiment(&mut s, &spec, &mut |_| {}).map_err(|e| e.to_string())?;
    let (x, y) = d.xy();
    let r = fit(model.model().as_ref(), &x, &y, Some(&d.error)).map_err(|e| e.to_string())?;
    let y_fit = r.curve(&x, &y).iter().map(|row| row[2]).collect();
    let simulated = d.metadata.clock_end - d.metadata.clock_start;
    Ok(Curve { x, y, error: d.error, y_fit, fit: r, simulated })
}

fn f_minus(config: &ApparatusConfig) -> Result<f64, String> {
    let app = Apparatus::new(config.clone(), 1).map_err(|e| e.to_string())?;
    let p = SpinParams::default()
        .with_field(to_nv_frame(app.snapshot().field, 0))
        .with_nuclear(config.sample.nvs[0].nuclear);
    Ok(transition_frequencies(&p).f_minus)
}

/// CW ODMR from 2.70 to 3.04 GHz with the magnet set for `field_gauss` at
/// `angle_deg` from the NV axis. Also reports the field recovered from the
/// fitted splitting.
pub fn odmr(field_gauss: f64, angle_deg: f64, seed: u64) -> Result<(Curve, f64), String> {
    if !(0.0..=60.0).contains(&field_gauss) {
        return Err(format!("field {field_gauss} G outside 0..60 G"));
    }
    let mut c = Preset::Odmr28G.config();
    let a = angle_deg.to_radians();
    let b = [field_gauss * GAUSS * a.sin(), 0.0, field_gauss * GAUSS * a.cos()];
    c.initial.magnet = MagnetState::for_nv_field(&c.magnet, b, 0);
    let freqs = (0..171).map(|i| 2.70e9 + i as f64 * 2e6).collect();
    let spec = ExperimentSpec::new(seed, Experiment::CwOdmr { frequencies: freqs, power_dbm: None, dwell: 0.2, period: 20e-6 });
    let curve = measure(c, spec, ModelKind::DoubleLorentzian)?;
    let split = curve.fit.derived("splitting").map_or(f64::NAN, |d| d.value);
    let b = field_from_splitting(split, GAMMA_E).map_or(f64::NAN, |b| b / GAUSS);
    Ok((curve, b))
}

/// Pulsed Rabi oscillation on the lower transition with the drive set for
/// `rabi_mhz`.
pub fn rabi(rabi_mhz: f64, repetitions: u64, seed: u64) -> Result<Curve, String> {
    if !(1.0..=50.0).contains(&rabi_mhz) {
        return Err(format!("Rabi frequency {rabi_mhz} MHz outside 1..50 MHz"));
    }
    let mut c = Preset::Rabi.config();
    c.initial.mw.power_dbm = c.mw.power_for_rabi(rabi_mhz * 1e6);
    let f = f_minus(&c)?;
    let span = 3.0 / (rabi_mhz * 1e6);
    let durations = (0..101).map(|i| i as f64 * span / 100.0).collect();
    let spec = ExperimentSpec::new(seed, Experiment::Rabi { durations, frequency: f, power_dbm: None })
        .with_repetitions(repetitions.max(1000));
    measure(c, spec, ModelKind::Rabi)
}

/// Photon correlation of one NV, or of two in the same spot when `pair`.
pub fn g2(pair: bool, duration: f64, seed: u64) -> Result<Curve, String> {
    if !(1.0..=600.0).contains(&duration) {
        return Err(format!("duration {duration} s outside 1..600 s"));
    }
    let c = if pair { Preset::G2Pair } else { Preset::G2Single }.config();
    let spec = ExperimentSpec::new(seed, Experiment::G2 { duration, bin: 0.5e-9, window: 100e-9, chunk: 1.0 });
    measure(c, spec, ModelKind::G2)
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("result serializes"),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen]
pub fn odmr_spectrum(field_gauss: f64, angle_deg: f64, seed: u32) -> String {
    to_json(odmr(field_gauss, angle_deg, seed.into()).map(|(curve, b)| json!({ "curve": curve, "field_gauss": b })))
}

#[wasm_bindgen]
pub fn rabi_curve(rabi_mhz: f64, repetitions: u32, seed: u32) -> String {
    to_json(rabi(rabi_mhz, repetitions.into(), seed.into()).map(|curve| {
        let pi = curve.fit.derived("pi_time").map_or(f64::NAN, |d| d.value);
        json!({ "curve": curve, "pi_time": pi })
    }))
}

#[wasm_bindgen]
pub fn g2_curve(pair: bool, duration: f64, seed: u32) -> String {
    to_json(g2(pair, duration, seed.into()).map(|curve| {
        let zero = curve.fit.derived("g2_zero").map_or(f64::NAN, |d| d.value);
        json!({ "curve": curve, "g2_zero": zero })
    }))
}
