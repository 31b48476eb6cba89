//! Primitive computations shared by inference and training forwards.

/// Epsilon inside the RMS denominator.
pub const RMS_EPS: f64 = 1e-8;

/// Base for the rotary frequency ladder.
pub const ROTARY_BASE: f64 = 10_000.0;

/// RMS normalization with gain: `y_i = g_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let inv = 1.0 / rms_denom(x);
    x.iter().zip(gain).map(|(v, g)| g * v * inv).collect()
}

/// The shared denominator `sqrt(mean(x^2) + eps)`.
pub fn rms_denom(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + RMS_EPS).sqrt()
}

/// Gaussian error linear unit, tanh form. Smooth everywhere, which keeps
/// finite-difference gradient checks honest.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Applies the rotary position map in place: consecutive pairs rotate by
/// `pos * base^(-2i/d)`. An orthogonal map, so norms are preserved and
/// score differences depend only on relative positions.
pub fn rotary(v: &mut [f64], pos: f64) {
    let d = v.len();
    debug_assert_eq!(d % 2, 0, "rotary needs an even dimension");
    for i in 0..d / 2 {
        let freq = ROTARY_BASE.powf(-(2.0 * i as f64) / d as f64);
        let theta = pos * freq;
        let (sin, cos) = theta.sin_cos();
        let a = v[2 * i];
        let b = v[2 * i + 1];
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

/// Inverse rotation, used by backprop.
pub fn rotary_inverse(v: &mut [f64], pos: f64) {
    rotary(v, -pos);
}
