//! Sinusoidal coordinate encodings.
//!
//! A normalized coordinate in [0, 1] maps to interleaved sin/cos pairs over a
//! geometric frequency ladder: pair p of `dims / 2` uses the argument
//! `2π v / 10000^(2p / dims)`, so pair 0 runs one full period across the range
//! and later pairs are progressively slower. `v = 0` encodes to [0, 1, 0, 1…].

use std::f64::consts::TAU;

/// Append the `dims`-wide (even) encoding of one coordinate.
pub fn encode_into(out: &mut Vec<f64>, v: f64, dims: usize) {
    debug_assert!(dims % 2 == 0);
    for p in 0..dims / 2 {
        let scale = 10000f64.powf(2.0 * p as f64 / dims as f64);
        let arg = TAU * v / scale;
        out.push(arg.sin());
        out.push(arg.cos());
    }
}

pub fn coord(v: f64, dims: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dims);
    encode_into(&mut out, v, dims);
    out
}

/// Encoding of a grid cell: thirds for x, y and t, `channels / 3` each.
pub fn cell(x: f64, y: f64, t: f64, channels: usize) -> Vec<f64> {
    debug_assert!(channels % 3 == 0 && (channels / 3) % 2 == 0);
    let third = channels / 3;
    let mut out = Vec::with_capacity(channels);
    encode_into(&mut out, x, third);
    encode_into(&mut out, y, third);
    encode_into(&mut out, t, third);
    out
}
