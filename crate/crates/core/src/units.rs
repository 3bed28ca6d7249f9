//! Conversions between user-facing units (kHz as ν = ω/2π, µs, ms, degrees)
//! and the internal rad/s, s, rad.

use std::f64::consts::PI;

const TWO_PI_KHZ: f64 = 2.0 * PI * 1.0e3;

pub fn khz_to_rad_s(khz: f64) -> f64 {
    khz * TWO_PI_KHZ
}

pub fn rad_s_to_khz(omega: f64) -> f64 {
    omega / TWO_PI_KHZ
}

pub fn us_to_s(us: f64) -> f64 {
    us * 1.0e-6
}

pub fn s_to_us(s: f64) -> f64 {
    s * 1.0e6
}

pub fn ms_to_s(ms: f64) -> f64 {
    ms * 1.0e-3
}

pub fn s_to_ms(s: f64) -> f64 {
    s * 1.0e3
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg.to_radians()
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad.to_degrees()
}

/// Rate in 1/s from a characteristic time in µs. An infinite time gives a zero rate.
pub fn rate_from_inverse_us(time_us: f64) -> f64 {
    1.0 / us_to_s(time_us)
}

pub fn inverse_us_from_rate(rate: f64) -> f64 {
    s_to_us(1.0 / rate)
}
