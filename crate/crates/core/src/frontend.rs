//! Acoustic front-end: 80-dim log mel-filterbank + 3 pitch features at a
//! 25 ms window / 10 ms shift, with mergeable CMVN statistics and a
//! binary per-utterance feature archive.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::Audio;
use crate::corpus::Manifest;
use crate::error::{Error, Result};

pub const FRAME_LENGTH_S: f64 = 0.025;
pub const FRAME_SHIFT_S: f64 = 0.010;
/// Log-energy floor: values below exp(-23) clamp to -23.
pub const LOG_FLOOR: f64 = -23.0;
const CMVN_EPS: f64 = 1e-8;

/// Pitch range searched by the autocorrelation tracker, Hz.
const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 400.0;
/// Reference frequency for the normalized log-f0 feature.
const F0_REF: f64 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchMode {
    /// Autocorrelation-based 3-dim pitch features.
    Auto,
    /// Three zero dimensions (ablation mode).
    Zeros,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub pitch: PitchMode,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 80,
            pitch: PitchMode::Auto,
        }
    }
}

/// T x D per-frame features plus the framing metadata they were made with.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
    pub dim_layout: String,
}

/// Number of frames for `n` samples under the 25 ms / 10 ms framing.
pub fn frame_count(n_samples: usize, sample_rate: u32) -> Result<usize> {
    let window = (FRAME_LENGTH_S * sample_rate as f64).round() as usize;
    let shift = (FRAME_SHIFT_S * sample_rate as f64).round() as usize;
    if n_samples < window {
        return Err(Error::AudioTooShort {
            samples: n_samples,
            window,
        });
    }
    Ok(1 + (n_samples - window) / shift)
}

/// Slice the signal into overlapping frames and apply a periodic Hann window.
pub fn frame_signal(samples: &[f64], sample_rate: u32) -> Result<Array2<f64>> {
    let window = (FRAME_LENGTH_S * sample_rate as f64).round() as usize;
    let shift = (FRAME_SHIFT_S * sample_rate as f64).round() as usize;
    let t = frame_count(samples.len(), sample_rate)?;
    let hann: Vec<f64> = (0..window)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window as f64).cos())
        .collect();
    let mut frames = Array2::zeros((t, window));
    for i in 0..t {
        let start = i * shift;
        for j in 0..window {
            frames[[i, j]] = samples[start + j] * hann[j];
        }
    }
    Ok(frames)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank (HTK mel scale) over an `n_fft`-point spectrum.
pub struct MelBanks {
    /// Per band: (first_bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    pub n_fft: usize,
}

impl MelBanks {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let f_low = 20.0;
        let f_high = sample_rate as f64 / 2.0;
        let m_low = hz_to_mel(f_low);
        let m_high = hz_to_mel(f_high);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_low + (m_high - m_low) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let mut filters = Vec::with_capacity(n_mels);
        for k in 0..n_mels {
            let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
            let mut first = None;
            let mut ws = Vec::new();
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if f >= mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    if first.is_none() {
                        first = Some(b);
                    }
                    ws.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), ws));
        }
        MelBanks {
            filters,
            centers_hz: edges[1..=n_mels].to_vec(),
            n_fft,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(first, ws)| {
                ws.iter()
                    .enumerate()
                    .map(|(i, w)| w * power[first + i])
                    .sum::<f64>()
            })
            .collect()
    }
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Log mel-filterbank energies from windowed frames.
///
/// Scaling the input samples by c shifts every un-floored output value by
/// exactly 2*ln(c).
pub fn fbank(frames: &Array2<f64>, sample_rate: u32, n_mels: usize) -> Array2<f64> {
    let window = frames.ncols();
    let n_fft = next_pow2(window);
    let banks = MelBanks::new(n_mels, n_fft, sample_rate);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let t = frames.nrows();
    let mut out = Array2::zeros((t, n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for i in 0..t {
        for (j, c) in buf.iter_mut().enumerate() {
            *c = if j < window {
                Complex::new(frames[[i, j]], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for (k, e) in banks.apply(&power).into_iter().enumerate() {
            out[[i, k]] = e.max(LOG_FLOOR.exp()).ln();
        }
    }
    out
}

/// 3-dim pitch features per frame: normalized log-f0, voicing probability,
/// delta log-f0. F0 from the normalized autocorrelation peak in
/// [60, 400] Hz; unvoiced frames carry the last voiced f0 forward.
pub fn pitch(samples: &[f64], sample_rate: u32) -> Result<Array2<f64>> {
    let window = (FRAME_LENGTH_S * sample_rate as f64).round() as usize;
    let shift = (FRAME_SHIFT_S * sample_rate as f64).round() as usize;
    let t = frame_count(samples.len(), sample_rate)?;
    let min_lag = (sample_rate as f64 / F0_MAX).floor() as usize;
    let max_lag = ((sample_rate as f64 / F0_MIN).ceil() as usize).min(window - 1);
    let mut out = Array2::zeros((t, 3));
    let mut last_f0 = F0_REF;
    let mut last_nlf0 = 0.0;
    for i in 0..t {
        let frame = &samples[i * shift..i * shift + window];
        let mut best_r = 0.0;
        let mut best_lag = 0;
        // Prefix sums of squared samples so per-lag energies are O(1).
        let mut sq = vec![0.0f64; window + 1];
        for (j, &x) in frame.iter().enumerate() {
            sq[j + 1] = sq[j] + x * x;
        }
        if sq[window] > 1e-12 {
            for lag in min_lag..=max_lag {
                let n = window - lag;
                let mut num = 0.0;
                for j in 0..n {
                    num += frame[j] * frame[j + lag];
                }
                let ea = sq[n];
                let eb = sq[window] - sq[lag];
                let denom = (ea * eb).sqrt();
                if denom > 1e-12 {
                    let r = num / denom;
                    if r > best_r {
                        best_r = r;
                        best_lag = lag;
                    }
                }
            }
        }
        let voicing = best_r.clamp(0.0, 1.0);
        let f0 = if voicing > 0.3 && best_lag > 0 {
            sample_rate as f64 / best_lag as f64
        } else {
            last_f0
        };
        last_f0 = f0;
        let nlf0 = (f0 / F0_REF).ln();
        let delta = if i == 0 { 0.0 } else { nlf0 - last_nlf0 };
        last_nlf0 = nlf0;
        out[[i, 0]] = nlf0;
        out[[i, 1]] = voicing;
        out[[i, 2]] = delta;
    }
    Ok(out)
}

/// Full front-end: fbank + pitch, horizontally stacked.
pub fn extract_features(audio: &Audio, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    let frames = frame_signal(&audio.samples, audio.sample_rate)?;
    let fb = fbank(&frames, audio.sample_rate, cfg.n_mels);
    let t = fb.nrows();
    let pt = match cfg.pitch {
        PitchMode::Auto => pitch(&audio.samples, audio.sample_rate)?,
        PitchMode::Zeros => Array2::zeros((t, 3)),
    };
    debug_assert_eq!(pt.nrows(), t);
    let mut data = Array2::zeros((t, cfg.n_mels + 3));
    data.slice_mut(ndarray::s![.., ..cfg.n_mels]).assign(&fb);
    data.slice_mut(ndarray::s![.., cfg.n_mels..]).assign(&pt);
    debug_assert!(data.iter().all(|v| v.is_finite()));
    Ok(FeatureMatrix {
        data,
        frame_shift_s: FRAME_SHIFT_S,
        frame_length_s: FRAME_LENGTH_S,
        dim_layout: format!("fbank{}+pitch3", cfg.n_mels),
    })
}

/// Mergeable per-dimension mean/variance statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub frame_count: u64,
}

impl CmvnStats {
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a Array2<f64>>) -> CmvnStats {
        let mut acc: Option<CmvnStats> = None;
        for f in features {
            let s = Self::of_matrix(f);
            acc = Some(match acc {
                None => s,
                Some(a) => a.merge(&s),
            });
        }
        acc.unwrap_or(CmvnStats {
            mean: Vec::new(),
            variance: Vec::new(),
            frame_count: 0,
        })
    }

    pub fn of_matrix(f: &Array2<f64>) -> CmvnStats {
        let n = f.nrows() as f64;
        let mean = f.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(0));
        let mut var = Array1::zeros(f.ncols());
        for row in f.rows() {
            for (d, v) in row.iter().enumerate() {
                let c = v - mean[d];
                var[d] += c * c;
            }
        }
        var.mapv_inplace(|v| v / n);
        CmvnStats {
            mean: mean.to_vec(),
            variance: var.to_vec(),
            frame_count: f.nrows() as u64,
        }
    }

    /// Merge so that stats(A).merge(stats(B)) == stats(A concat B).
    pub fn merge(&self, other: &CmvnStats) -> CmvnStats {
        if self.frame_count == 0 {
            return other.clone();
        }
        if other.frame_count == 0 {
            return self.clone();
        }
        assert_eq!(self.mean.len(), other.mean.len(), "CMVN dim mismatch");
        let na = self.frame_count as f64;
        let nb = other.frame_count as f64;
        let n = na + nb;
        let mut mean = vec![0.0; self.mean.len()];
        let mut var = vec![0.0; self.mean.len()];
        for d in 0..mean.len() {
            let delta = other.mean[d] - self.mean[d];
            mean[d] = self.mean[d] + delta * nb / n;
            var[d] = (na * self.variance[d] + nb * other.variance[d]) / n
                + delta * delta * na * nb / (n * n);
        }
        CmvnStats {
            mean,
            variance: var,
            frame_count: self.frame_count + other.frame_count,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Msg(format!("serialize cmvn: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CmvnStats> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Msg(format!("parse cmvn {}: {e}", path.display())))
    }
}

/// Standardize per dimension: (x - mean) / sqrt(variance + eps).
pub fn cmvn_apply(features: &Array2<f64>, stats: &CmvnStats) -> Result<Array2<f64>> {
    if stats.frame_count < 2 {
        return Err(Error::InvalidConfig(format!(
            "CMVN stats need frame_count > 1, got {}",
            stats.frame_count
        )));
    }
    if features.ncols() != stats.mean.len() {
        return Err(Error::DimensionMismatch {
            what: "cmvn_apply".into(),
            expected: stats.mean.len(),
            got: features.ncols(),
        });
    }
    let mut out = features.clone();
    for mut row in out.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[d]) / (stats.variance[d] + CMVN_EPS).sqrt();
        }
    }
    Ok(out)
}

/// Inverse of [`cmvn_apply`] given the same stats.
pub fn cmvn_invert(normalized: &Array2<f64>, stats: &CmvnStats) -> Array2<f64> {
    let mut out = normalized.clone();
    for mut row in out.rows_mut() {
        for (d, v) in row.iter_mut().enumerate() {
            *v = *v * (stats.variance[d] + CMVN_EPS).sqrt() + stats.mean[d];
        }
    }
    out
}

const ARCHIVE_MAGIC: &[u8; 8] = b"SATRFEAT";

/// Writer for the binary feature archive: `feats.bin` holds raw f64
/// matrices, `feats.idx` maps utt_id to (element offset, rows, cols).
pub struct FeatureArchiveWriter {
    bin: BufWriter<fs::File>,
    idx_lines: Vec<String>,
    elems_written: u64,
    dir: PathBuf,
    meta: String,
}

impl FeatureArchiveWriter {
    pub fn create(dir: &Path, dim_layout: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin_path = dir.join("feats.bin");
        let mut bin = BufWriter::new(fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
        bin.write_all(ARCHIVE_MAGIC).map_err(|e| Error::io(&bin_path, e))?;
        bin.write_all(&1u32.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        Ok(FeatureArchiveWriter {
            bin,
            idx_lines: Vec::new(),
            elems_written: 0,
            dir: dir.to_path_buf(),
            meta: format!(
                "#{}",
                serde_json::json!({
                    "dim_layout": dim_layout,
                    "frame_shift_s": FRAME_SHIFT_S,
                    "frame_length_s": FRAME_LENGTH_S,
                })
            ),
        })
    }

    pub fn append(&mut self, utt_id: &str, data: &Array2<f64>) -> Result<()> {
        let path = self.dir.join("feats.bin");
        for v in data.iter() {
            self.bin
                .write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        self.idx_lines.push(format!(
            "{utt_id}\t{}\t{}\t{}",
            self.elems_written,
            data.nrows(),
            data.ncols()
        ));
        self.elems_written += (data.nrows() * data.ncols()) as u64;
        Ok(())
    }

    pub fn finalize(mut self) -> Result<()> {
        let bin_path = self.dir.join("feats.bin");
        self.bin.flush().map_err(|e| Error::io(&bin_path, e))?;
        let idx_path = self.dir.join("feats.idx");
        let mut text = self.meta;
        text.push('\n');
        for l in &self.idx_lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(&idx_path, text).map_err(|e| Error::io(&idx_path, e))
    }
}

/// Read-side of the feature archive.
pub struct FeatureArchive {
    index: HashMap<String, (u64, usize, usize)>,
    order: Vec<String>,
    bin_path: PathBuf,
    pub dim_layout: String,
}

impl FeatureArchive {
    pub fn open(dir: &Path) -> Result<Self> {
        let idx_path = dir.join("feats.idx");
        let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
        let mut index = HashMap::new();
        let mut order = Vec::new();
        let mut dim_layout = String::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') {
                if let Ok(meta) = serde_json::from_str::<serde_json::Value>(&line[1..]) {
                    if let Some(l) = meta.get("dim_layout").and_then(|v| v.as_str()) {
                        dim_layout = l.to_string();
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    file: idx_path.clone(),
                    line: i + 1,
                    msg: "expected 4 fields".into(),
                });
            }
            let parse = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Parse {
                    file: idx_path.clone(),
                    line: i + 1,
                    msg: format!("bad number {s:?}"),
                })
            };
            index.insert(
                f[0].to_string(),
                (parse(f[1])?, parse(f[2])? as usize, parse(f[3])? as usize),
            );
            order.push(f[0].to_string());
        }
        Ok(FeatureArchive {
            index,
            order,
            bin_path: dir.join("feats.bin"),
            dim_layout,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn contains(&self, utt_id: &str) -> bool {
        self.index.contains_key(utt_id)
    }

    pub fn get(&self, utt_id: &str) -> Result<Array2<f64>> {
        let (offset, rows, cols) = *self
            .index
            .get(utt_id)
            .ok_or_else(|| Error::NotFound(format!("features for {utt_id}")))?;
        let mut file = fs::File::open(&self.bin_path).map_err(|e| Error::io(&self.bin_path, e))?;
        let header = ARCHIVE_MAGIC.len() as u64 + 4;
        file.seek(SeekFrom::Start(header + offset * 8))
            .map_err(|e| Error::io(&self.bin_path, e))?;
        let mut bytes = vec![0u8; rows * cols * 8];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::io(&self.bin_path, e))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Array2::from_shape_vec((rows, cols), vals)
            .map_err(|e| Error::Msg(format!("archive shape: {e}")))
    }
}

/// Extract features for every manifest record into an archive directory.
pub fn extract_manifest_features(
    manifest: &Manifest,
    cfg: &FrontendConfig,
    out_dir: &Path,
) -> Result<()> {
    let feats: Vec<(String, FeatureMatrix)> = manifest
        .records
        .par_iter()
        .map(|r| -> Result<(String, FeatureMatrix)> {
            let audio = crate::audio::read_wav(&manifest.audio_path(r))?;
            let f = extract_features(&audio, cfg)?;
            Ok((r.utt_id.clone(), f))
        })
        .collect::<Result<_>>()?;
    let layout = feats
        .first()
        .map(|(_, f)| f.dim_layout.clone())
        .unwrap_or_else(|| format!("fbank{}+pitch3", cfg.n_mels));
    let mut writer = FeatureArchiveWriter::create(out_dir, &layout)?;
    for (id, f) in &feats {
        writer.append(id, &f.data)?;
    }
    writer.finalize()
}

/// Global CMVN stats over all utterances in a manifest's archive.
pub fn compute_cmvn(archive: &FeatureArchive, utt_ids: &[String]) -> Result<CmvnStats> {
    let stats: Vec<CmvnStats> = utt_ids
        .par_iter()
        .map(|id| archive.get(id).map(|f| CmvnStats::of_matrix(&f)))
        .collect::<Result<_>>()?;
    Ok(stats
        .into_iter()
        .fold(None::<CmvnStats>, |acc, s| {
            Some(match acc {
                None => s,
                Some(a) => a.merge(&s),
            })
        })
        .unwrap_or(CmvnStats {
            mean: Vec::new(),
            variance: Vec::new(),
            frame_count: 0,
        }))
}
