//! Polyphase rational-ratio resampling with a Kaiser-windowed sinc kernel.
//!
//! The rate pair reduces to L/M by gcd; the kernel is a symmetric windowed sinc of
//! 64·L + 1 taps (odd length, so the output has no fractional delay) cut off at the
//! smaller of the two Nyquist frequencies. Edges use mirrored input samples.

use crate::{Error, Result};

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth modified Bessel function of the first kind, power series.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=30 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < 1e-18 * sum {
            break;
        }
    }
    sum
}

const KAISER_BETA: f64 = 8.0;
const TAPS_PER_PHASE: usize = 64;
const MAX_FACTOR: u64 = 1000;

/// Mirror-folds an index into [0, n). Assumes n >= 1.
fn fold(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Resamples from `from` Hz to `to` Hz. Output length is round(n·to/from).
pub fn resample(x: &[f64], from: u32, to: u32) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::InvalidParameter(format!("resample rates {from} -> {to} must be nonzero")));
    }
    if x.is_empty() {
        return Err(Error::InvalidParameter("resample on empty signal".into()));
    }
    if from == to {
        return Ok(x.to_vec());
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize; // L
    let down = (from as u64 / g) as usize; // M
    if up as u64 > MAX_FACTOR || down as u64 > MAX_FACTOR {
        return Err(Error::InvalidParameter(format!(
            "rate ratio {to}/{from} reduces to {up}/{down}; factors above {MAX_FACTOR} unsupported"
        )));
    }

    // Kernel in the upsampled domain (rate from·L): cutoff at the smaller Nyquist.
    let taps = TAPS_PER_PHASE * up + 1;
    let center = (taps / 2) as i64;
    let cutoff = std::f64::consts::PI * (1.0 / up as f64).min(1.0 / down as f64);
    let i0_beta = bessel_i0(KAISER_BETA);
    let mut kernel = Vec::with_capacity(taps);
    for j in 0..taps {
        let dj = j as i64 - center;
        let sinc = if dj == 0 {
            cutoff / std::f64::consts::PI
        } else {
            (cutoff * dj as f64).sin() / (std::f64::consts::PI * dj as f64)
        };
        let frac = dj as f64 / center as f64;
        let window = bessel_i0(KAISER_BETA * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
        kernel.push(sinc * window * up as f64);
    }

    let n = x.len();
    let out_len = ((n * up) as u64 + down as u64 / 2) / down as u64;
    let mut out = Vec::with_capacity(out_len as usize);
    for m in 0..out_len as i64 {
        // Upsampled position of output sample m; kernel tap j touches upsampled index
        // t - center + j, which maps to an input sample iff divisible by L.
        let t = m * down as i64;
        let first = t - center;
        let rem = first.rem_euclid(up as i64);
        let mut j = if rem == 0 { 0 } else { (up as i64 - rem) as usize };
        let mut acc = 0.0;
        while j < taps {
            let input_idx = (first + j as i64) / up as i64;
            acc += kernel[j] * x[fold(input_idx, n)];
            j += up;
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / rate).sin()).collect()
    }

    #[test]
    fn identity_when_rates_match() {
        let x = tone(5.0, 100.0, 256);
        assert_eq!(resample(&x, 100, 100).unwrap(), x);
    }

    #[test]
    fn output_length_is_rounded_ratio() {
        let x = vec![0.0; 1000];
        assert_eq!(resample(&x, 1000, 500).unwrap().len(), 500);
        assert_eq!(resample(&x, 250, 200).unwrap().len(), 800);
        let odd = vec![0.0; 999];
        let got = resample(&odd, 1000, 500).unwrap().len();
        assert!((got as i64 - 500).unsigned_abs() <= 1, "999 -> {got}");
    }

    #[test]
    fn rejects_unreasonable_ratios_and_empty_input() {
        assert!(resample(&[], 100, 50).is_err());
        assert!(resample(&[0.0; 8], 0, 50).is_err());
        // 44100/1024 reduces to 11025/256; 11025 > 1000.
        assert!(resample(&[0.0; 8], 44100, 1024).is_err());
    }

    #[test]
    fn halving_preserves_a_low_tone() {
        let x = tone(5.0, 1000.0, 4000);
        let y = resample(&x, 1000, 500).unwrap();
        let reference = tone(5.0, 500.0, y.len());
        let mid = 200..y.len() - 200;
        let rms = (mid.clone().map(|i| (y[i] - reference[i]).powi(2)).sum::<f64>()
            / mid.len() as f64)
            .sqrt();
        assert!(rms < 0.02, "rms {rms}");
    }

    #[test]
    fn upsampling_by_rational_factor_preserves_a_tone() {
        // 250 -> 200 Hz is the EEG path: L=4, M=5.
        let x = tone(20.0, 250.0, 2500);
        let y = resample(&x, 250, 200).unwrap();
        let reference = tone(20.0, 200.0, y.len());
        let mid = 200..y.len() - 200;
        let rms = (mid.clone().map(|i| (y[i] - reference[i]).powi(2)).sum::<f64>()
            / mid.len() as f64)
            .sqrt();
        assert!(rms < 0.02, "rms {rms}");
    }

    #[test]
    fn resampling_is_deterministic() {
        let x = tone(7.3, 1000.0, 3000);
        let a = resample(&x, 1000, 500).unwrap();
        let b = resample(&x, 1000, 500).unwrap();
        assert_eq!(a, b);
    }
}
