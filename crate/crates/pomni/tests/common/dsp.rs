//! DSP behavior checks with an independent spectral oracle: amplitudes are measured by
//! least-squares sinusoid fitting over integer-cycle windows, never by the code under test.

use pomni::sigproc::{butter_bandpass, filtfilt, notch_sections, resample, NOTCH_Q};

/// Least-squares amplitude of a sinusoid at `freq` in `x`. Exact when the slice spans an
/// integer number of cycles.
pub fn amplitude_at(x: &[f64], rate: f64, freq: f64) -> f64 {
    let n = x.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let phase = std::f64::consts::TAU * freq * i as f64 / rate;
        c += v * phase.cos();
        s += v * phase.sin();
    }
    2.0 * (c * c + s * s).sqrt() / n
}

fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / rate).sin()).collect()
}

fn db_down(input: f64, output: f64) -> f64 {
    20.0 * (input / output.max(1e-300)).log10()
}

/// Band-pass 1-30 Hz at 256 Hz: DC attenuated >= 40 dB.
pub fn bandpass_kills_dc() -> Result<(), String> {
    let sections = butter_bandpass(1.0, 30.0, 256.0).map_err(|e| e.to_string())?;
    let x = vec![1.0; 4096];
    let y = filtfilt(&sections, &x).map_err(|e| e.to_string())?;
    let mid = &y[1024..3072];
    let residual = (mid.iter().sum::<f64>() / mid.len() as f64).abs();
    let db = db_down(1.0, residual);
    if db >= 40.0 {
        Ok(())
    } else {
        Err(format!("DC only {db:.1} dB down (need 40)"))
    }
}

/// Band-pass 1-30 Hz at 256 Hz: a 10 Hz tone keeps its amplitude within 10%.
pub fn bandpass_passes_midband_tone() -> Result<(), String> {
    let sections = butter_bandpass(1.0, 30.0, 256.0).map_err(|e| e.to_string())?;
    let x = tone(10.0, 256.0, 4096);
    let y = filtfilt(&sections, &x).map_err(|e| e.to_string())?;
    let amp = amplitude_at(&y[1024..3072], 256.0, 10.0);
    if (amp - 1.0).abs() <= 0.10 {
        Ok(())
    } else {
        Err(format!("10 Hz amplitude {amp:.4} outside 1±0.10"))
    }
}

/// Band-pass 1-30 Hz at 256 Hz: a 60 Hz tone attenuated >= 20 dB.
pub fn bandpass_rejects_stopband_tone() -> Result<(), String> {
    let sections = butter_bandpass(1.0, 30.0, 256.0).map_err(|e| e.to_string())?;
    let x = tone(60.0, 256.0, 4096);
    let y = filtfilt(&sections, &x).map_err(|e| e.to_string())?;
    let amp = amplitude_at(&y[1024..3072], 256.0, 60.0);
    let db = db_down(1.0, amp);
    if db >= 20.0 {
        Ok(())
    } else {
        Err(format!("60 Hz only {db:.1} dB down (need 20)"))
    }
}

/// Notch at 50 Hz (Q=30), 256 Hz rate: the 50 Hz tone drops >= 30 dB while 30 Hz stays
/// within 10%.
pub fn notch_is_narrow_and_deep() -> Result<(), String> {
    let sections = notch_sections(&[50.0], 256.0, NOTCH_Q).map_err(|e| e.to_string())?;
    let hum = tone(50.0, 256.0, 8192);
    let killed = filtfilt(&sections, &hum).map_err(|e| e.to_string())?;
    let hum_amp = amplitude_at(&killed[2048..6144], 256.0, 50.0);
    let db = db_down(1.0, hum_amp);
    if db < 30.0 {
        return Err(format!("50 Hz only {db:.1} dB down (need 30)"));
    }
    let signal = tone(30.0, 256.0, 8192);
    let kept = filtfilt(&sections, &signal).map_err(|e| e.to_string())?;
    let sig_amp = amplitude_at(&kept[2048..6144], 256.0, 30.0);
    if (sig_amp - 1.0).abs() <= 0.10 {
        Ok(())
    } else {
        Err(format!("30 Hz amplitude {sig_amp:.4} outside 1±0.10"))
    }
}

/// 1000 -> 500 Hz of a 5 Hz sine: RMS error < 0.02 against the analytic reference.
pub fn resample_matches_analytic_tone() -> Result<(), String> {
    let x = tone(5.0, 1000.0, 8000);
    let y = resample(&x, 1000, 500).map_err(|e| e.to_string())?;
    let reference = tone(5.0, 500.0, y.len());
    let span = 400..y.len() - 400;
    let rms = (span.clone().map(|i| (y[i] - reference[i]).powi(2)).sum::<f64>()
        / span.len() as f64)
        .sqrt();
    if rms < 0.02 {
        Ok(())
    } else {
        Err(format!("resample RMS error {rms:.4} (need < 0.02)"))
    }
}

/// A tone at 0.8x the smaller Nyquist survives resampling within RMS 0.02.
pub fn resample_preserves_near_nyquist_tone() -> Result<(), String> {
    let x = tone(200.0, 1000.0, 8000);
    let y = resample(&x, 1000, 500).map_err(|e| e.to_string())?;
    let reference = tone(200.0, 500.0, y.len());
    let span = 400..y.len() - 400;
    let rms = (span.clone().map(|i| (y[i] - reference[i]).powi(2)).sum::<f64>()
        / span.len() as f64)
        .sqrt();
    if rms < 0.02 {
        Ok(())
    } else {
        Err(format!("0.8-Nyquist RMS error {rms:.4} (need < 0.02)"))
    }
}

/// filtfilt introduces no phase shift: lag-0 cross-correlation dominates nearby lags.
pub fn filtering_is_zero_phase() -> Result<(), String> {
    let sections = butter_bandpass(1.0, 30.0, 256.0).map_err(|e| e.to_string())?;
    let x = tone(10.0, 256.0, 4096);
    let y = filtfilt(&sections, &x).map_err(|e| e.to_string())?;
    let corr = |lag: i64| -> f64 {
        (1024..3072).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum()
    };
    let at_zero = corr(0);
    for lag in [-4i64, -3, -2, -1, 1, 2, 3, 4] {
        if corr(lag) > at_zero {
            return Err(format!("correlation at lag {lag} beats lag 0"));
        }
    }
    Ok(())
}

pub fn all() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("bandpass kills DC (>=40 dB)", bandpass_kills_dc),
        ("bandpass passes 10 Hz within 10%", bandpass_passes_midband_tone),
        ("bandpass rejects 60 Hz (>=20 dB)", bandpass_rejects_stopband_tone),
        ("notch 50 Hz deep (>=30 dB), 30 Hz intact", notch_is_narrow_and_deep),
        ("resample 1000->500 matches analytic 5 Hz tone", resample_matches_analytic_tone),
        ("resample preserves 0.8-Nyquist tone", resample_preserves_near_nyquist_tone),
        ("filtering is zero-phase", filtering_is_zero_phase),
    ]
}
