//! Real spherical-harmonics basis for view-direction encoding.
//!
//! `degree` counts bands, so degree 4 covers `l = 0..=3` and yields 16
//! coefficients. Ordering within a band runs `m = -l..=l`; no Condon-Shortley
//! phase is applied.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 4;

const C0: f64 = 0.282_094_791_773_878_14; // 1 / (2√π)
const C1: f64 = 0.488_602_511_902_919_9; // √(3 / 4π)
const C2_XY: f64 = 1.092_548_430_592_079_2; // √(15 / π) / 2
const C2_Z: f64 = 0.315_391_565_252_520_05; // √(5 / π) / 4
const C2_X2Y2: f64 = 0.546_274_215_296_039_6; // √(15 / π) / 4
const C3_A: f64 = 0.590_043_589_926_643_5; // √(35 / 32π)
const C3_B: f64 = 2.890_611_442_640_554; // √(105 / π) / 2
const C3_C: f64 = 0.457_045_799_464_465_8; // √(21 / 32π)
const C3_D: f64 = 0.373_176_332_590_115_4; // √(7 / π) / 4
const C3_E: f64 = 1.445_305_721_320_277; // √(105 / π) / 4

pub fn sh_len(degree: usize) -> usize {
    degree * degree
}

/// Evaluate the basis for direction `d` (normalized here; only the zero
/// vector is an error).
pub fn sh_encode(d: &Vector3<f64>, degree: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sh_len(degree)];
    sh_encode_into(d, degree, &mut out)?;
    Ok(out)
}

pub fn sh_encode_into(d: &Vector3<f64>, degree: usize, out: &mut [f64]) -> Result<()> {
    if degree == 0 || degree > MAX_SH_DEGREE {
        return Err(Error::Config(format!(
            "spherical-harmonics degree must be in 1..={MAX_SH_DEGREE}, got {degree}"
        )));
    }
    let n = d
        .try_normalize(0.0)
        .ok_or_else(|| Error::Validation("cannot encode a zero view direction".into()))?;
    let (x, y, z) = (n.x, n.y, n.z);
    out[0] = C0;
    if degree == 1 {
        return Ok(());
    }
    out[1] = C1 * y;
    out[2] = C1 * z;
    out[3] = C1 * x;
    if degree == 2 {
        return Ok(());
    }
    let (x2, y2, z2) = (x * x, y * y, z * z);
    out[4] = C2_XY * x * y;
    out[5] = C2_XY * y * z;
    out[6] = C2_Z * (3.0 * z2 - 1.0);
    out[7] = C2_XY * x * z;
    out[8] = C2_X2Y2 * (x2 - y2);
    if degree == 3 {
        return Ok(());
    }
    out[9] = C3_A * y * (3.0 * x2 - y2);
    out[10] = C3_B * x * y * z;
    out[11] = C3_C * y * (5.0 * z2 - 1.0);
    out[12] = C3_D * z * (5.0 * z2 - 3.0);
    out[13] = C3_C * x * (5.0 * z2 - 1.0);
    out[14] = C3_E * z * (x2 - y2);
    out[15] = C3_A * x * (x2 - 3.0 * y2);
    Ok(())
}
