use serde::{Deserialize, Serialize};

/// Polar angle between the (100) surface normal and a ⟨111⟩ axis, deg.
pub const MAGIC_ANGLE_DEG: f64 = 54.735_610_317_245_35;

/// The four NV axes in the lab (crystal) frame, unnormalized.
const AXES: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];

pub fn nv_axis(orientation: u8) -> [f64; 3] {
    let a = AXES[orientation as usize % 4];
    let n = 3f64.sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Orthonormal `(x̂, ŷ, ẑ)` with ẑ along the NV axis.
pub fn nv_frame(orientation: u8) -> [[f64; 3]; 3] {
    let z = nv_axis(orientation);
    let seed = if z[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let x = normalize(cross(seed, z));
    let y = cross(z, x);
    [x, y, z]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Lab-frame vector expressed in the NV frame.
pub fn to_nv_frame(v: [f64; 3], orientation: u8) -> [f64; 3] {
    let f = nv_frame(orientation);
    [dot(v, f[0]), dot(v, f[1]), dot(v, f[2])]
}

pub fn from_nv_frame(v: [f64; 3], orientation: u8) -> [f64; 3] {
    let f = nv_frame(orientation);
    let mut out = [0.0; 3];
    for (k, axis) in f.iter().enumerate() {
        for i in 0..3 {
            out[i] += v[k] * axis[i];
        }
    }
    out
}

/// Permanent magnet on a micrometer stage and goniometer pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetConfig {
    /// Field magnitude at `d_ref`, T.
    pub b_ref: f64,
    /// mm.
    pub d_ref: f64,
    /// Allowed distance range, mm.
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        Self { b_ref: 50e-4, d_ref: 20.0, d_min: 2.0, d_max: 200.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagnetState {
    /// mm.
    pub distance: f64,
    /// Polar angle from the surface normal, deg.
    pub theta: f64,
    /// Azimuth, deg.
    pub phi: f64,
}

impl MagnetState {
    /// Field along the first ⟨111⟩ axis.
    pub fn magic(distance: f64) -> Self {
        Self { distance, theta: MAGIC_ANGLE_DEG, phi: 45.0 }
    }

    /// Setting that produces the NV-frame field `[bx, by, bz]` (T) on an NV
    /// of the given orientation.
    pub fn for_nv_field(cfg: &MagnetConfig, b_nv: [f64; 3], orientation: u8) -> Self {
        let lab = from_nv_frame(b_nv, orientation);
        let mag = dot(lab, lab).sqrt();
        if mag == 0.0 {
            return Self { distance: cfg.d_max, theta: 0.0, phi: 0.0 };
        }
        let u = [lab[0] / mag, lab[1] / mag, lab[2] / mag];
        Self {
            distance: cfg.d_ref * (cfg.b_ref / mag).cbrt(),
            theta: u[2].clamp(-1.0, 1.0).acos().to_degrees(),
            phi: u[1].atan2(u[0]).to_degrees(),
        }
    }
}

/// Dipole-law field at the sample in the lab frame, T.
pub fn field_at_sample(cfg: &MagnetConfig, m: &MagnetState) -> Result<[f64; 3], String> {
    if !(m.distance > 0.0) || !m.distance.is_finite() {
        return Err(format!("magnet distance must be positive, got {} mm", m.distance));
    }
    let mag = cfg.b_ref * (cfg.d_ref / m.distance).powi(3);
    let (t, p) = (m.theta.to_radians(), m.phi.to_radians());
    Ok([mag * t.sin() * p.cos(), mag * t.sin() * p.sin(), mag * t.cos()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magic_angle_aligns_with_first_axis() {
        let cfg = MagnetConfig::default();
        let b = field_at_sample(&cfg, &MagnetState::magic(20.0)).unwrap();
        let nv = to_nv_frame(b, 0);
        assert!(nv[0].hypot(nv[1]) < 1e-6 * nv[2].abs());
        assert!((nv[2] - cfg.b_ref).abs() < 1e-12);
    }

    #[test]
    fn inverse_cube_law() {
        let cfg = MagnetConfig::default();
        let m = MagnetState { distance: 10.0, theta: 20.0, phi: 0.0 };
        let a = field_at_sample(&cfg, &m).unwrap();
        let b = field_at_sample(&cfg, &MagnetState { distance: 20.0, ..m }).unwrap();
        let n = |v: [f64; 3]| dot(v, v).sqrt();
        assert!((n(a) / n(b) - 8.0).abs() < 1e-12);
        assert!(field_at_sample(&cfg, &MagnetState { distance: 0.0, ..m }).is_err());
    }

    #[test]
    fn nv_field_setting_round_trips() {
        let cfg = MagnetConfig::default();
        let want = [30e-4, -5e-4, 20e-4];
        for o in 0..4 {
            let m = MagnetState::for_nv_field(&cfg, want, o);
            let got = to_nv_frame(field_at_sample(&cfg, &m).unwrap(), o);
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        for o in 0..4 {
            let f = nv_frame(o);
            for i in 0..3 {
                for j in 0..3 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(f[i], f[j]) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
