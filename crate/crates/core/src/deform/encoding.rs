use std::f64::consts::PI;

/// `(sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp))`.
pub fn positional_encode(p: f64, levels: usize) -> impl Iterator<Item = f64> {
    (0..levels).flat_map(move |l| {
        let (s, c) = (2f64.powi(l as i32) * PI * p).sin_cos();
        [s, c]
    })
}
