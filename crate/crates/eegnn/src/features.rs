//! Preprocessing: five-band differential-entropy features from raw
//! multi-channel recordings, optionally smoothed by a linear dynamic system.
//!
//! The band filter is an order-4 Butterworth band-pass applied zero-phase
//! (forward-backward). Differential entropy models each window as Gaussian:
//! `DE = 0.5 * ln(2 * pi * e * var)`, with the variance clamped at `1e-12` so
//! constant windows produce a finite floor instead of `-inf`. The smoother is
//! a fixed-interval Kalman (RTS) smoother for the random-walk state model.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// One frequency band in hertz.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BandDef {
    pub name: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
}

impl BandDef {
    pub fn new(name: &str, lo_hz: f64, hi_hz: f64) -> Self {
        BandDef {
            name: name.into(),
            lo_hz,
            hi_hz,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo_hz > 0.0 && self.hi_hz > self.lo_hz) {
            return Err(Error::Validation(format!(
                "band {:?}: need 0 < lo < hi, got [{}, {}]",
                self.name, self.lo_hz, self.hi_hz
            )));
        }
        Ok(())
    }
}

/// Conventional affective-EEG band boundaries; configurable, not ground truth.
pub fn default_bands() -> Vec<BandDef> {
    vec![
        BandDef::new("delta", 1.0, 4.0),
        BandDef::new("theta", 4.0, 8.0),
        BandDef::new("alpha", 8.0, 14.0),
        BandDef::new("beta", 14.0, 30.0),
        BandDef::new("gamma", 30.0, 47.0),
    ]
}

/// A raw multi-channel recording at a fixed sampling rate.
#[derive(Debug, Clone)]
pub struct RawRecording {
    /// `[n_channels, n_timesteps]`
    pub signal: Array2<f64>,
    pub fs_hz: f64,
}

impl RawRecording {
    pub fn new(signal: Array2<f64>, fs_hz: f64) -> Result<Self> {
        if !(fs_hz > 0.0) {
            return Err(Error::Validation(format!("fs_hz must be positive, got {fs_hz}")));
        }
        if (signal.ncols() as f64) < fs_hz {
            return Err(Error::Validation(format!(
                "recording must cover at least one second: {} samples at {} Hz",
                signal.ncols(),
                fs_hz
            )));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("recording contains non-finite samples".into()));
        }
        Ok(RawRecording { signal, fs_hz })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingMeta {
    pub fs_hz: f64,
    pub n_channels: usize,
    pub n_timesteps: usize,
}

/// Parse `recording.json` plus a little-endian f32 `signal.bin` payload
/// (channel-major) into a validated recording.
pub fn load_recording_from_parts(meta_bytes: &[u8], signal_bytes: &[u8]) -> Result<RawRecording> {
    let meta: RecordingMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        file: "recording.json".into(),
        message: e.to_string(),
    })?;
    if meta.n_channels == 0 || meta.n_timesteps == 0 {
        return Err(Error::Format {
            file: "recording.json".into(),
            message: "n_channels and n_timesteps must be positive".into(),
        });
    }
    let count = meta
        .n_channels
        .checked_mul(meta.n_timesteps)
        .and_then(|n| n.checked_mul(4));
    let expected = match count {
        Some(c) => c as u64,
        None => {
            return Err(Error::Format {
                file: "recording.json".into(),
                message: "dimension product overflows".into(),
            })
        }
    };
    if signal_bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            file: "signal.bin".into(),
            expected,
            actual: signal_bytes.len() as u64,
        });
    }
    let values: Vec<f64> = signal_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let signal = Array2::from_shape_vec((meta.n_channels, meta.n_timesteps), values)
        .expect("length checked above");
    RawRecording::new(signal, meta.fs_hz)
}

pub fn load_recording(dir: &std::path::Path) -> Result<RawRecording> {
    let meta = std::fs::read(dir.join("recording.json"))
        .map_err(|e| Error::io(dir.join("recording.json"), e))?;
    let signal = std::fs::read(dir.join("signal.bin"))
        .map_err(|e| Error::io(dir.join("signal.bin"), e))?;
    load_recording_from_parts(&meta, &signal)
}

/// Gaussian differential entropy of a window: `0.5 * ln(2 pi e var)`, where
/// `var` is the population variance. Variances below `1e-12` are clamped.
pub fn differential_entropy(window: &[f64]) -> Result<f64> {
    if window.len() < 2 {
        return Err(Error::Validation(format!(
            "differential entropy needs at least 2 samples, got {}",
            window.len()
        )));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let var = var.max(VARIANCE_FLOOR);
    Ok(0.5 * (2.0 * PI * std::f64::consts::E * var).ln())
}

// --- Butterworth band-pass design -----------------------------------------

/// Second-order section with normalized `a0 = 1`.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2], // a1, a2
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = Complex64::new(self.b[0], 0.0) + z1 * self.b[1] + z2 * self.b[2];
        let den = Complex64::new(1.0, 0.0) + z1 * self.a[0] + z2 * self.a[1];
        num / den
    }
}

/// Design an order-4 digital Butterworth band-pass (two cascaded biquads)
/// via the analog prototype, LP->BP transform and bilinear mapping, with unit
/// gain at the prewarp-consistent center frequency.
fn design_butter_bandpass(lo_hz: f64, hi_hz: f64, fs_hz: f64) -> Vec<Biquad> {
    let fs2 = 2.0 * fs_hz;
    let w1 = fs2 * (PI * lo_hz / fs_hz).tan();
    let w2 = fs2 * (PI * hi_hz / fs_hz).tan();
    let w0sq = w1 * w2;
    let bw = w2 - w1;

    // Order-2 Butterworth prototype: the upper-half-plane pole. Its band-pass
    // images pair with their conjugates (from the conjugate prototype pole)
    // to form the two sections.
    let proto = Complex64::from_polar(1.0, 3.0 * PI / 4.0);
    let pbw = proto * bw;
    let disc = (pbw * pbw - 4.0 * w0sq).sqrt();
    let analog_poles = [(pbw + disc) * 0.5, (pbw - disc) * 0.5];

    let mut sections = Vec::with_capacity(2);
    for s in analog_poles {
        let zp = (Complex64::new(fs2, 0.0) + s) / (Complex64::new(fs2, 0.0) - s);
        // Denominator (1 - zp z^-1)(1 - conj(zp) z^-1); numerator carries one
        // zero at z = +1 and one at z = -1.
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-2.0 * zp.re, zp.norm_sqr()],
        });
    }

    // Normalize overall gain to 1 at the mapped center frequency.
    let wc = 2.0 * (w0sq.sqrt() / fs2).atan();
    let h: Complex64 = sections.iter().map(|s| s.response(wc)).product();
    let g = 1.0 / h.norm();
    for v in sections[0].b.iter_mut() {
        *v *= g;
    }
    sections
}

fn sos_filter(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        let mut z1 = 0.0;
        let mut z2 = 0.0;
        for v in y.iter_mut() {
            let xin = *v;
            let out = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[0] * out + z2;
            z2 = s.b[2] * xin - s.a[1] * out;
            *v = out;
        }
    }
    y
}

/// Zero-phase filtering: forward pass, reverse, forward pass, reverse, with
/// odd-reflection padding at both ends to tame edge transients.
fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * (2 * sections.len() + 1)).min(n.saturating_sub(1));
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = sos_filter(sections, &ext);
    y.reverse();
    let mut y = sos_filter(sections, &y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Band-pass one channel zero-phase. Exposed for tests and custom pipelines.
pub fn bandpass_zero_phase(x: &[f64], band: &BandDef, fs_hz: f64) -> Result<Vec<f64>> {
    band.validate()?;
    if band.hi_hz >= fs_hz / 2.0 {
        return Err(Error::Config {
            path: "bands".into(),
            message: format!(
                "band {:?} upper edge {} Hz is not below Nyquist ({} Hz)",
                band.name,
                band.hi_hz,
                fs_hz / 2.0
            ),
        });
    }
    let sections = design_butter_bandpass(band.lo_hz, band.hi_hz, fs_hz);
    Ok(filtfilt(&sections, x))
}

/// Differential-entropy features per non-overlapping window, channel and band.
///
/// Returns `[n_windows, n_channels, n_bands]` with
/// `n_windows = floor(n_timesteps / (fs_hz * window_sec))`; window `k` spans
/// samples `[floor(k * fs * w), floor((k+1) * fs * w))`.
pub fn extract_de(
    rec: &RawRecording,
    bands: &[BandDef],
    window_sec: f64,
) -> Result<Array3<f64>> {
    if bands.is_empty() {
        return Err(Error::Validation("at least one band required".into()));
    }
    if !(window_sec > 0.0) {
        return Err(Error::Validation(format!(
            "window_sec must be positive, got {window_sec}"
        )));
    }
    let samples_per_window = rec.fs_hz * window_sec;
    if samples_per_window < 2.0 {
        return Err(Error::Validation(format!(
            "window of {window_sec}s at {} Hz holds fewer than 2 samples",
            rec.fs_hz
        )));
    }
    let n_t = rec.signal.ncols();
    let n_windows = (n_t as f64 / samples_per_window).floor() as usize;
    if n_windows == 0 {
        return Err(Error::Validation("recording shorter than one window".into()));
    }
    let n_channels = rec.signal.nrows();
    let mut out = Array3::<f64>::zeros((n_windows, n_channels, bands.len()));
    for (bi, band) in bands.iter().enumerate() {
        for ch in 0..n_channels {
            let x: Vec<f64> = rec.signal.row(ch).to_vec();
            let filtered = bandpass_zero_phase(&x, band, rec.fs_hz)?;
            for w in 0..n_windows {
                let start = (w as f64 * samples_per_window).floor() as usize;
                let end = ((w + 1) as f64 * samples_per_window).floor() as usize;
                out[[w, ch, bi]] = differential_entropy(&filtered[start..end])?;
            }
        }
    }
    Ok(out)
}

// --- Linear-dynamic-system smoothing ---------------------------------------

/// Fixed-interval Kalman (RTS) smoother for the random-walk model
/// `x_t = x_{t-1} + w_t`, `y_t = x_t + v_t` with process variance `q` and
/// observation variance `r`. The prior is `N(y_0, q + r)`, which keeps the
/// smoother exactly linear in its input.
pub fn lds_smooth(series: &[f64], q: f64, r: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Validation("cannot smooth an empty series".into()));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("series contains non-finite values".into()));
    }
    if !(q > 0.0) || !(r > 0.0) {
        return Err(Error::Validation(format!(
            "process and observation variances must be positive, got q={q}, r={r}"
        )));
    }
    let n = series.len();
    let mut m_pred = vec![0.0; n];
    let mut p_pred = vec![0.0; n];
    let mut m_filt = vec![0.0; n];
    let mut p_filt = vec![0.0; n];

    m_pred[0] = series[0];
    p_pred[0] = q + r;
    for t in 0..n {
        if t > 0 {
            m_pred[t] = m_filt[t - 1];
            p_pred[t] = p_filt[t - 1] + q;
        }
        let k = p_pred[t] / (p_pred[t] + r);
        m_filt[t] = m_pred[t] + k * (series[t] - m_pred[t]);
        p_filt[t] = (1.0 - k) * p_pred[t];
    }

    let mut smooth = vec![0.0; n];
    smooth[n - 1] = m_filt[n - 1];
    for t in (0..n - 1).rev() {
        let c = p_filt[t] / p_pred[t + 1];
        smooth[t] = m_filt[t] + c * (smooth[t + 1] - m_pred[t + 1]);
    }
    Ok(smooth)
}

/// Smooth with the default parameterization `q = 0.01 * var(series)`,
/// `r = var(series)`. Constant series pass through unchanged.
pub fn lds_smooth_default(series: &[f64]) -> Result<Vec<f64>> {
    let n = series.len() as f64;
    if series.is_empty() {
        return Err(Error::Validation("cannot smooth an empty series".into()));
    }
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Ok(series.to_vec());
    }
    lds_smooth(series, 0.01 * var, var)
}
