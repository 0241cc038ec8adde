//! IIR biquad filtering: Butterworth band-pass (as cascaded high-pass + low-pass sections)
//! and mains notch, all applied zero-phase (forward-backward with reflected padding).

use crate::{Error, Result};

/// One second-order section, coefficients normalized so a0 = 1.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

/// 4th-order Butterworth pole quality factors: 1/(2cos(π/8)) and 1/(2cos(3π/8)).
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_6];

fn angular(freq: f64, rate: f64) -> (f64, f64) {
    let w0 = std::f64::consts::TAU * freq / rate;
    (w0.cos(), w0.sin())
}

impl Biquad {
    /// Bilinear-transform low-pass section at `freq` with quality factor `q`.
    pub fn lowpass(freq: f64, rate: f64, q: f64) -> Biquad {
        let (cw, sw) = angular(freq, rate);
        let alpha = sw / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cw) / 2.0 / a0,
            b1: (1.0 - cw) / a0,
            b2: (1.0 - cw) / 2.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub fn highpass(freq: f64, rate: f64, q: f64) -> Biquad {
        let (cw, sw) = angular(freq, rate);
        let alpha = sw / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cw) / 2.0 / a0,
            b1: -(1.0 + cw) / a0,
            b2: (1.0 + cw) / 2.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Narrow band-reject at `freq`; Q = 30 gives roughly a 1.7 Hz wide stopband at 50 Hz.
    pub fn notch(freq: f64, rate: f64, q: f64) -> Biquad {
        let (cw, sw) = angular(freq, rate);
        let alpha = sw / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * cw / a0,
            b2: 1.0 / a0,
            a1: -2.0 * cw / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    /// Direct-form II transposed, zero initial state.
    fn run(&self, x: &mut [f64]) {
        let (mut s1, mut s2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b0 * xin + s1;
            s1 = self.b1 * xin - self.a1 * y + s2;
            s2 = self.b2 * xin - self.a2 * y;
            *v = y;
        }
    }
}

/// 4th-order Butterworth band-pass as HP(low) x 2 + LP(high) x 2 sections.
pub fn butter_bandpass(low: f64, high: f64, rate: f64) -> Result<Vec<Biquad>> {
    let nyquist = rate / 2.0;
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(Error::InvalidParameter(format!(
            "band ({low}, {high}) Hz invalid at {rate} Hz (need 0 < low < high < {nyquist})"
        )));
    }
    Ok(vec![
        Biquad::highpass(low, rate, BUTTER4_Q[0]),
        Biquad::highpass(low, rate, BUTTER4_Q[1]),
        Biquad::lowpass(high, rate, BUTTER4_Q[0]),
        Biquad::lowpass(high, rate, BUTTER4_Q[1]),
    ])
}

pub fn notch_sections(freqs: &[f64], rate: f64, q: f64) -> Result<Vec<Biquad>> {
    let nyquist = rate / 2.0;
    for &f in freqs {
        if !(f > 0.0 && f < nyquist) {
            return Err(Error::InvalidParameter(format!(
                "notch {f} Hz outside (0, {nyquist}) at {rate} Hz"
            )));
        }
    }
    Ok(freqs.iter().map(|&f| Biquad::notch(f, rate, q)).collect())
}

/// Zero-phase filtering: odd-reflect pad both ends, run the cascade forward, then backward,
/// then trim. Padding is linear in the input, so the whole operation stays linear.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidParameter("filtfilt on empty signal".into()));
    }
    if n < 2 {
        return Ok(x.to_vec());
    }
    let pad = (n - 1).min(36 * sections.len().max(1));
    let mut buf = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        buf.push(2.0 * x[0] - x[i]);
    }
    buf.extend_from_slice(x);
    for i in 1..=pad {
        buf.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    for s in sections {
        s.run(&mut buf);
    }
    buf.reverse();
    for s in sections {
        s.run(&mut buf);
    }
    buf.reverse();
    Ok(buf[pad..pad + n].to_vec())
}
