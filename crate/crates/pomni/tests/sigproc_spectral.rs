//! Spectral behavior of the DSP front end, measured by an independent least-squares
//! amplitude oracle (see `common::dsp`).

mod common;

use common::dsp;
use pomni::sigproc::{fourier_amplitude_target, preprocess_channel, ModalitySpec};
use pomni::Modality;

#[test]
fn dsp_behavior_suite() {
    for (name, check) in dsp::all() {
        check().unwrap_or_else(|msg| panic!("{name}: {msg}"));
    }
}

#[test]
fn preprocess_channel_runs_the_full_chain() {
    // 4 s of 10 Hz tone at 250 Hz with a 50 Hz hum and a DC offset, in microvolts.
    let spec = ModalitySpec::standard(Modality::Eeg, 50.0);
    let x: Vec<f64> = (0..1000)
        .map(|i| {
            let t = i as f64 / 250.0;
            30.0 * (std::f64::consts::TAU * 10.0 * t).sin()
                + 20.0 * (std::f64::consts::TAU * 50.0 * t).sin()
                + 15.0
        })
        .collect();
    let y = preprocess_channel(&x, 250, &spec).unwrap();
    assert_eq!(y.len(), 800, "resampled to 200 Hz");

    let mid = &y[200..600];
    // Scale: 30 uV -> 0.3 after /100; hum and DC suppressed.
    let tone_amp = dsp::amplitude_at(mid, 200.0, 10.0);
    let hum_amp = dsp::amplitude_at(mid, 200.0, 50.0);
    let dc = mid.iter().sum::<f64>() / mid.len() as f64;
    assert!((tone_amp - 0.3).abs() < 0.03, "tone {tone_amp}");
    assert!(hum_amp < 0.3 * 0.05, "hum {hum_amp}");
    assert!(dc.abs() < 0.02, "dc {dc}");
}

#[test]
fn fourier_target_matches_oracle_on_mixed_tone() {
    // DFT magnitudes and the least-squares oracle must agree on integer-cycle content,
    // and z-scoring preserves the bin ordering.
    let n = 200;
    let patch: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            0.8 * (std::f64::consts::TAU * 4.0 * t).sin()
                + 0.25 * (std::f64::consts::TAU * 31.0 * t).cos()
        })
        .collect();
    let mags = pomni::sigproc::dft_magnitudes(&patch);
    let oracle4 = dsp::amplitude_at(&patch, n as f64, 4.0);
    let oracle31 = dsp::amplitude_at(&patch, n as f64, 31.0);
    assert!((mags[4] - oracle4 * n as f64 / 2.0).abs() < 1e-9);
    assert!((mags[31] - oracle31 * n as f64 / 2.0).abs() < 1e-9);
    let target = fourier_amplitude_target(&patch);
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.sort_by(|&a, &b| target[b].partial_cmp(&target[a]).unwrap());
    assert_eq!(order[0], 4, "strongest tone stays the top bin after z-scoring");
    assert_eq!(order[1], 31);
}
