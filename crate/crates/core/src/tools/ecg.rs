//! Single-lead ECG interpretation: R-peak detection, wave delineation and
//! time-domain heart-rate-variability features.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformRecord {
    /// Millivolts.
    pub samples: Vec<f64>,
    /// Hz.
    pub sampling_rate: f64,
    #[serde(default)]
    pub lead: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EcgError {
    #[error("sampling rate must be positive and finite (got {0})")]
    BadRate(f64),
    #[error("signal too short: {got} samples, rhythm analysis needs at least {needed}")]
    TooShort { needed: usize, got: usize },
    #[error("RR interval list is empty")]
    EmptyRr,
    #[error("malformed waveform input: {0}")]
    Format(String),
}

impl WaveformRecord {
    pub fn new(samples: Vec<f64>, sampling_rate: f64, lead: impl Into<String>) -> Self {
        Self { samples, sampling_rate, lead: lead.into() }
    }

    pub fn check(&self) -> Result<(), EcgError> {
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return Err(EcgError::BadRate(self.sampling_rate));
        }
        let needed = (2.0 * self.sampling_rate).ceil() as usize;
        if self.samples.len() < needed {
            return Err(EcgError::TooShort { needed, got: self.samples.len() });
        }
        Ok(())
    }

    /// One sample per line. `#` lines may carry `sampling_rate=<hz>` and
    /// `lead=<label>`; a single non-numeric header line is skipped.
    pub fn from_csv(text: &str) -> Result<Self, EcgError> {
        let mut rate = None;
        let mut lead = String::new();
        let mut samples = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("sampling_rate", v)) => {
                            rate = Some(v.parse::<f64>().map_err(|_| EcgError::Format(format!("bad sampling_rate {v:?}")))?)
                        }
                        Some(("lead", v)) => lead = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            let field = line.split(',').next().unwrap_or("").trim();
            match field.parse::<f64>() {
                Ok(v) => samples.push(v),
                Err(_) if !header_seen && samples.is_empty() => header_seen = true,
                Err(_) => return Err(EcgError::Format(format!("line {}: not a number: {field:?}", n + 1))),
            }
        }
        let rate = rate.ok_or_else(|| EcgError::Format("missing `# sampling_rate=<hz>` line".into()))?;
        Ok(Self { samples, sampling_rate: rate, lead })
    }

    pub fn load(path: &Path) -> Result<Self, EcgError> {
        let text = std::fs::read_to_string(path).map_err(|e| EcgError::Format(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::from_csv(&text)
        } else {
            serde_json::from_str(&text).map_err(|e| EcgError::Format(e.to_string()))
        }
    }

    fn ms_to_samples(&self, ms: f64) -> usize {
        (ms * self.sampling_rate / 1000.0).round() as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn new(cutoff: f64, fs: f64, high_pass: bool) -> Self {
        let w0 = 2.0 * PI * cutoff / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        let b = if high_pass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                (x2, x1, y2, y1) = (x1, x0, y1, y0);
                y0
            })
            .collect()
    }
}

/// Causal passes first, then anti-causal ones, so leading zeros stay zero
/// and the response is zero-phase.
fn bandpass(record: &WaveformRecord) -> Vec<f64> {
    let fs = record.sampling_rate;
    let mut stages = vec![Biquad::new(5.0, fs, true)];
    if 15.0 < fs / 2.0 {
        stages.push(Biquad::new(15.0, fs, false));
    }
    let mut y = record.samples.clone();
    for s in &stages {
        y = s.run(&y);
    }
    y.reverse();
    for s in &stages {
        y = s.run(&y);
    }
    y.reverse();
    y
}

fn energy(filtered: &[f64], window: usize) -> Vec<f64> {
    let n = filtered.len();
    let at = |i: isize| if i < 0 || i as usize >= n { 0.0 } else { filtered[i as usize] };
    let sq: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (2.0 * at(i + 1) + at(i + 2) - 2.0 * at(i - 1) - at(i - 2)) / 8.0;
            d * d
        })
        .collect();
    // Centered moving-window integration.
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sq[i];
    }
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / window as f64
        })
        .collect()
}

/// Energy-threshold QRS detector: band-pass, squared derivative, moving
/// integration, adaptive signal/noise thresholds, 200 ms refractory period
/// and search-back for missed beats.
pub fn detect_r_peaks(record: &WaveformRecord) -> Result<Vec<usize>, EcgError> {
    record.check()?;
    let x = &record.samples;
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo <= 0.0 {
        return Ok(Vec::new());
    }
    let filtered = bandpass(record);
    let mwi = energy(&filtered, record.ms_to_samples(150.0).max(1));
    let max = mwi.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let refractory = record.ms_to_samples(200.0).max(1);

    let candidates: Vec<usize> = (1..mwi.len().saturating_sub(1))
        .filter(|&i| mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1])
        .collect();

    let mut spki = 0.5 * max;
    let mut npki = 0.0;
    let mut accepted: Vec<usize> = Vec::new();
    let mut noise_since_last: Vec<usize> = Vec::new();

    for &i in &candidates {
        let v = mwi[i];
        let threshold = npki + 0.25 * (spki - npki);
        if v > threshold {
            if let Some(&last) = accepted.last() {
                if i - last < refractory {
                    if v > mwi[last] {
                        *accepted.last_mut().unwrap() = i;
                        spki = 0.125 * v + 0.875 * spki;
                    }
                    continue;
                }
                // Search back for a beat the threshold missed.
                let rr: Vec<usize> = accepted.windows(2).rev().take(8).map(|w| w[1] - w[0]).collect();
                if !rr.is_empty() {
                    let avg = rr.iter().sum::<usize>() as f64 / rr.len() as f64;
                    if (i - last) as f64 > 1.66 * avg {
                        let best = noise_since_last
                            .iter()
                            .copied()
                            .filter(|&c| c >= last + refractory && c + refractory <= i && mwi[c] > 0.5 * threshold)
                            .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]).then(b.cmp(&a)));
                        if let Some(c) = best {
                            accepted.push(c);
                            spki = 0.25 * mwi[c] + 0.75 * spki;
                        }
                    }
                }
            }
            accepted.push(i);
            spki = 0.125 * v + 0.875 * spki;
            noise_since_last.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise_since_last.push(i);
        }
    }

    // Refine each beat to the band-passed extremum near the energy peak.
    let half = record.ms_to_samples(75.0);
    let mut peaks: Vec<usize> = Vec::with_capacity(accepted.len());
    for &i in &accepted {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(filtered.len());
        let r = (lo..hi).max_by(|&a, &b| filtered[a].abs().total_cmp(&filtered[b].abs()).then(b.cmp(&a))).unwrap();
        match peaks.last() {
            Some(&prev) if r <= prev || r - prev < refractory => {
                if filtered[r].abs() > filtered[prev].abs() {
                    *peaks.last_mut().unwrap() = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveBoundary {
    pub onset: usize,
    pub peak: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatBoundaries {
    pub r_peak: usize,
    pub p: Option<WaveBoundary>,
    pub qrs: Option<WaveBoundary>,
    pub t: Option<WaveBoundary>,
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Walks outward from `peak` while the deviation stays above `level`,
/// never leaving `lo..hi`.
fn bracket(dev: &[f64], peak: usize, level: f64, lo: usize, hi: usize) -> (usize, usize) {
    let mut onset = peak;
    while onset > lo && dev[onset - 1].abs() > level {
        onset -= 1;
    }
    let mut offset = peak;
    while offset + 1 < hi && dev[offset + 1].abs() > level {
        offset += 1;
    }
    (onset, offset)
}

/// Largest-magnitude interior extremum in `lo..hi` at least `min_amp` from
/// baseline; `None` when the window is empty or the wave is not there.
fn find_wave(dev: &[f64], lo: usize, hi: usize, min_amp: f64) -> Option<WaveBoundary> {
    if hi <= lo + 2 {
        return None;
    }
    let peak = (lo..hi).max_by(|&a, &b| dev[a].abs().total_cmp(&dev[b].abs()).then(b.cmp(&a)))?;
    if peak == lo || peak + 1 == hi || dev[peak].abs() < min_amp {
        return None;
    }
    let (onset, offset) = bracket(dev, peak, 0.2 * dev[peak].abs(), lo, hi);
    Some(WaveBoundary { onset, peak, offset })
}

/// Per-beat P/QRS/T boundaries. Search windows of neighbouring beats are
/// split at the RR midpoint so boundaries never overlap across beats.
pub fn delineate(record: &WaveformRecord, r_peaks: &[usize]) -> Vec<BeatBoundaries> {
    if r_peaks.is_empty() {
        return Vec::new();
    }
    let x = &record.samples;
    let base = median(x);
    let dev: Vec<f64> = x.iter().map(|v| v - base).collect();
    let ms = |m: f64| record.ms_to_samples(m);
    let n = x.len();

    r_peaks
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let left_limit = if k > 0 { (r_peaks[k - 1] + r) / 2 + 1 } else { 0 };
            let right_limit = if k + 1 < r_peaks.len() { (r + r_peaks[k + 1]) / 2 } else { n };
            let r_amp = dev[r].abs();

            let qrs = (r_amp > 0.0).then(|| {
                let lo = r.saturating_sub(ms(120.0)).max(left_limit);
                let hi = (r + ms(120.0) + 1).min(right_limit);
                let (onset, offset) = bracket(&dev, r, 0.1 * r_amp, lo, hi);
                WaveBoundary { onset, peak: r, offset }
            });
            let qrs_on = qrs.map_or(r, |q| q.onset);
            let qrs_off = qrs.map_or(r, |q| q.offset);
            let min_amp = 0.05 * r_amp;

            let p_lo = r.saturating_sub(ms(300.0)).max(left_limit);
            let p_hi = r.saturating_sub(ms(80.0)).min(qrs_on);
            let p = if r_amp > 0.0 && p_hi > p_lo { find_wave(&dev, p_lo, p_hi, min_amp) } else { None };

            let t_lo = (r + ms(80.0)).max(qrs_off + 1);
            let t_hi = (r + ms(400.0)).min(right_limit);
            let t = if r_amp > 0.0 && t_hi > t_lo { find_wave(&dev, t_lo, t_hi, min_amp) } else { None };

            BeatBoundaries { r_peak: r, p, qrs, t }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrFeatures {
    pub mean_hr_bpm: f64,
    pub sdnn_ms: f64,
    pub rmssd_ms: f64,
    /// False when fewer than two intervals exist; `rmssd_ms` is then 0.
    pub rmssd_defined: bool,
    pub irregular: bool,
}

pub const DEFAULT_IRREGULAR_CV: f64 = 0.15;

pub fn rr_features(rr_ms: &[f64]) -> Result<RrFeatures, EcgError> {
    rr_features_with(rr_ms, DEFAULT_IRREGULAR_CV)
}

/// `irregular_cv`: coefficient-of-variation threshold above which the rhythm
/// is flagged irregular.
pub fn rr_features_with(rr_ms: &[f64], irregular_cv: f64) -> Result<RrFeatures, EcgError> {
    if rr_ms.is_empty() {
        return Err(EcgError::EmptyRr);
    }
    let n = rr_ms.len() as f64;
    let mean = rr_ms.iter().sum::<f64>() / n;
    let sdnn = (rr_ms.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (rmssd, defined) = if rr_ms.len() < 2 {
        (0.0, false)
    } else {
        let sq: f64 = rr_ms.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        ((sq / (n - 1.0)).sqrt(), true)
    };
    Ok(RrFeatures {
        mean_hr_bpm: 60000.0 / mean,
        sdnn_ms: sdnn,
        rmssd_ms: rmssd,
        rmssd_defined: defined,
        irregular: sdnn / mean > irregular_cv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgReport {
    pub r_peaks: Vec<usize>,
    pub wave_boundaries: Vec<BeatBoundaries>,
    pub rr_ms: Vec<f64>,
    /// Absent when fewer than two beats were found.
    pub features: Option<RrFeatures>,
    pub narrative: String,
}

impl EcgReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn narrative(lead: &str, peaks: &[usize], beats: &[BeatBoundaries], features: Option<&RrFeatures>) -> String {
    let prefix = if lead.is_empty() { "ECG".to_string() } else { format!("ECG lead {lead}") };
    let Some(f) = features else {
        return match peaks.len() {
            0 => format!("{prefix}: no beats detected."),
            _ => format!("{prefix}: 1 beat detected; too few beats for rate analysis."),
        };
    };
    let rhythm = if f.irregular { "irregular rhythm" } else { "regular rhythm" };
    let rmssd = if f.rmssd_defined { format!("{:.0} ms", f.rmssd_ms) } else { "not defined".to_string() };
    let with_p = beats.iter().filter(|b| b.p.is_some()).count();
    let with_t = beats.iter().filter(|b| b.t.is_some()).count();
    format!(
        "{prefix}: mean heart rate {:.0} bpm, {rhythm}; SDNN {:.0} ms, RMSSD {rmssd}; {} beats detected; P waves in {with_p}/{n} beats, T waves in {with_t}/{n} beats.",
        f.mean_hr_bpm,
        f.sdnn_ms,
        peaks.len(),
        n = beats.len(),
    )
}

/// detect → delineate → rr_features, plus a template narrative.
pub fn ecg_report(record: &WaveformRecord) -> Result<EcgReport, EcgError> {
    let r_peaks = detect_r_peaks(record)?;
    let wave_boundaries = delineate(record, &r_peaks);
    let rr_ms: Vec<f64> =
        r_peaks.windows(2).map(|w| (w[1] - w[0]) as f64 * 1000.0 / record.sampling_rate).collect();
    let features = if rr_ms.is_empty() { None } else { Some(rr_features(&rr_ms)?) };
    let narrative = narrative(&record.lead, &r_peaks, &wave_boundaries, features.as_ref());
    Ok(EcgReport { r_peaks, wave_boundaries, rr_ms, features, narrative })
}
