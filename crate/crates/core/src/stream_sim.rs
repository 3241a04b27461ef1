//! Synthetic labeled audio/video feature streams for the three streaming
//! tasks (event alerts, narration, reactive QA), plus timing-label
//! derivation and class-balance statistics.
//!
//! Streams carry unit-variance Gaussian background features. Events and
//! narration regimes inject an additive signature vector of fixed
//! magnitude 2.0, so every task is separable by construction and learnable
//! by a small model. Alert signatures share a common base direction across
//! samples (events stay linearly detectable); narration/QA signatures come
//! from a fixed per-index codebook so identity and transitions carry
//! information.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::vocab::{self, TokenId, N_SIGNATURE_DIRS};

pub const SIGNATURE_MAGNITUDE: f64 = 2.0;
/// Audio vectors per full second (one per 40 ms).
pub const AUDIO_PER_SECOND: usize = 25;
/// Video frames per second (2 fps sampling).
pub const FRAMES_PER_SECOND: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Alert,
    Narration,
    ReactiveQa,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Alert => "alert",
            TaskKind::Narration => "narration",
            TaskKind::ReactiveQa => "reactive_qa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_v: usize,
    pub d_a: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims { d_v: 16, d_a: 16, grid_h: 2, grid_w: 2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskAnnotations {
    /// Closed integer-second event intervals [start, end].
    #[serde(default)]
    pub event_windows: Vec<(usize, usize)>,
    /// Signature codebook index per event window (QA streams).
    #[serde(default)]
    pub event_dirs: Vec<usize>,
    /// Regime-transition seconds, strictly increasing, excluding t = 0.
    #[serde(default)]
    pub segment_boundaries: Vec<usize>,
    /// Reference caption per narration segment.
    #[serde(default)]
    pub segment_captions: Vec<Vec<TokenId>>,
    #[serde(default)]
    pub query_time_s: Option<usize>,
    #[serde(default)]
    pub query_tokens: Vec<TokenId>,
    #[serde(default)]
    pub answer_tokens: Vec<TokenId>,
    #[serde(default)]
    pub clue_time_s: Option<usize>,
}

impl TaskAnnotations {
    pub fn validate(&self, duration_s: usize) -> Result<()> {
        for &(s, e) in &self.event_windows {
            if e < s {
                return Err(CoreError::data(format!("degenerate event window [{s}, {e}]")));
            }
            if e >= duration_s {
                return Err(CoreError::data(format!(
                    "event window [{s}, {e}] exceeds duration {duration_s}"
                )));
            }
        }
        if !self.segment_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::data("segment boundaries not strictly increasing"));
        }
        if self.segment_boundaries.iter().any(|&b| b == 0 || b >= duration_s) {
            return Err(CoreError::data("segment boundary outside (0, duration)"));
        }
        if let Some(q) = self.query_time_s {
            if q >= duration_s {
                return Err(CoreError::data(format!(
                    "query time {q} beyond duration {duration_s}"
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic labeled stream: per-second features plus task annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSample {
    pub sample_id: String,
    pub task: TaskKind,
    pub duration_s: usize,
    pub dims: FeatureDims,
    /// Per second: FRAMES_PER_SECOND frame grids, each grid_h*grid_w cells of d_v.
    pub video_frames: Vec<Vec<Vec<Vec<f64>>>>,
    /// Per second: AUDIO_PER_SECOND vectors of d_a.
    pub audio_features: Vec<Vec<Vec<f64>>>,
    pub annotations: TaskAnnotations,
}

/// Per-unit binary trigger labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingLabels {
    pub z: Vec<u8>,
}

impl TimingLabels {
    pub fn positives(&self) -> usize {
        self.z.iter().filter(|&&b| b == 1).count()
    }
}

// ---------------------------------------------------------------------------
// Signature directions
// ---------------------------------------------------------------------------

// Deterministic unit direction shared across all samples; `tag`
// distinguishes the codebook entries and the alert family.
fn base_direction(dim: usize, tag: u64) -> Vec<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(0x5167_0000 ^ tag.wrapping_mul(0x9e37_79b9) ^ ((dim as u64) << 32));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

const ALERT_TAG: u64 = 100;

/// Signature vector: magnitude SIGNATURE_MAGNITUDE along a jittered base
/// direction. `jitter` controls how far individual samples stray from the
/// shared direction.
fn signature_from(dim: usize, tag: u64, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = base_direction(dim, tag);
    let mut v: Vec<f64> = base
        .iter()
        .map(|&b| b + jitter * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&mut v);
    v.iter_mut().for_each(|x| *x *= SIGNATURE_MAGNITUDE);
    v
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn noise_grid(dims: &FeatureDims, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..dims.grid_h * dims.grid_w)
        .map(|_| (0..dims.d_v).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn background(duration_s: usize, dims: &FeatureDims, rng: &mut ChaCha8Rng) -> (Vec<Vec<Vec<Vec<f64>>>>, Vec<Vec<Vec<f64>>>) {
    let video = (0..duration_s)
        .map(|_| (0..FRAMES_PER_SECOND).map(|_| noise_grid(dims, rng)).collect())
        .collect();
    let audio = (0..duration_s)
        .map(|_| {
            (0..AUDIO_PER_SECOND)
                .map(|_| (0..dims.d_a).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect();
    (video, audio)
}

fn add_signature_second(
    video_second: &mut [Vec<Vec<f64>>],
    audio_second: &mut [Vec<f64>],
    sig_v: &[f64],
    sig_a: &[f64],
) {
    for frame in video_second.iter_mut() {
        for cell in frame.iter_mut() {
            for (x, s) in cell.iter_mut().zip(sig_v) {
                *x += s;
            }
        }
    }
    for vec in audio_second.iter_mut() {
        for (x, s) in vec.iter_mut().zip(sig_a) {
            *x += s;
        }
    }
}

/// Place `n_events` non-overlapping closed windows inside [0, duration).
fn place_windows(
    duration_s: usize,
    n_events: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let min_width = 2usize;
    if n_events == 0 {
        return Err(CoreError::data("n_events must be >= 1"));
    }
    if n_events * min_width > duration_s {
        return Err(CoreError::data(format!(
            "cannot pack {n_events} event windows into {duration_s} seconds"
        )));
    }
    let max_width = (duration_s / n_events).min(6).max(min_width);
    let mut widths: Vec<usize> = (0..n_events)
        .map(|_| rng.gen_range(min_width..=max_width))
        .collect();
    let mut total: usize = widths.iter().sum();
    while total > duration_s {
        for w in widths.iter_mut() {
            if total > duration_s && *w > min_width {
                *w -= 1;
                total -= 1;
            }
        }
    }
    // Spread the slack as random gaps before/between/after the windows.
    let slack = duration_s - total;
    let mut gaps = vec![0usize; n_events + 1];
    for _ in 0..slack {
        let g = rng.gen_range(0..gaps.len());
        gaps[g] += 1;
    }
    let mut windows = Vec::with_capacity(n_events);
    let mut cursor = 0usize;
    for (i, w) in widths.iter().enumerate() {
        cursor += gaps[i];
        windows.push((cursor, cursor + w - 1));
        cursor += w;
    }
    Ok(windows)
}

/// Event-alert stream: background noise with a per-sample signature added
/// inside each event window.
pub fn generate_alert_stream(
    duration_s: usize,
    n_events: usize,
    dims: FeatureDims,
    rng_seed: u64,
) -> Result<StreamSample> {
    if duration_s < 4 {
        return Err(CoreError::data("alert stream needs duration_s >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let windows = place_windows(duration_s, n_events, &mut rng)?;
    let sig_v = signature_from(dims.d_v, ALERT_TAG, 0.5, &mut rng);
    let sig_a = signature_from(dims.d_a, ALERT_TAG, 0.5, &mut rng);
    let (mut video, mut audio) = background(duration_s, &dims, &mut rng);
    for &(s, e) in &windows {
        for t in s..=e {
            add_signature_second(&mut video[t], &mut audio[t], &sig_v, &sig_a);
        }
    }
    let annotations = TaskAnnotations { event_windows: windows, ..Default::default() };
    annotations.validate(duration_s)?;
    Ok(StreamSample {
        sample_id: format!("alert-{rng_seed:08x}"),
        task: TaskKind::Alert,
        duration_s,
        dims,
        video_frames: video,
        audio_features: audio,
        annotations,
    })
}

/// Narration stream: a concatenation of regimes, each with a distinct
/// signature and a reference caption; boundaries mark regime starts.
pub fn generate_narration_stream(
    duration_s: usize,
    n_segments: usize,
    dims: FeatureDims,
    rng_seed: u64,
) -> Result<StreamSample> {
    if n_segments < 2 {
        return Err(CoreError::data("narration stream needs n_segments >= 2"));
    }
    if n_segments > duration_s {
        return Err(CoreError::data(format!(
            "cannot fit {n_segments} segments into {duration_s} seconds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    // Even split plus remainder, then a bounded jitter on each boundary.
    let base = duration_s / n_segments;
    let mut lens = vec![base; n_segments];
    for i in 0..duration_s - base * n_segments {
        lens[i] += 1;
    }
    let min_len = if duration_s >= 2 * n_segments { 2 } else { 1 };
    for i in 0..n_segments - 1 {
        let shift: i64 = rng.gen_range(-1..=1);
        if shift == 1 && lens[i + 1] > min_len {
            lens[i] += 1;
            lens[i + 1] -= 1;
        } else if shift == -1 && lens[i] > min_len {
            lens[i] -= 1;
            lens[i + 1] += 1;
        }
    }
    let mut starts = Vec::with_capacity(n_segments);
    let mut cursor = 0usize;
    for &l in &lens {
        starts.push(cursor);
        cursor += l;
    }
    debug_assert_eq!(cursor, duration_s);

    let (mut video, mut audio) = background(duration_s, &dims, &mut rng);
    let mut captions = Vec::with_capacity(n_segments);
    for (i, &start) in starts.iter().enumerate() {
        let tag = (i % N_SIGNATURE_DIRS) as u64;
        let sig_v = signature_from(dims.d_v, tag, 0.3, &mut rng);
        let sig_a = signature_from(dims.d_a, tag, 0.3, &mut rng);
        let end = if i + 1 < n_segments { starts[i + 1] } else { duration_s };
        for t in start..end {
            add_signature_second(&mut video[t], &mut audio[t], &sig_v, &sig_a);
        }
        captions.push(vocab::caption_for_dir(i % N_SIGNATURE_DIRS));
    }
    let annotations = TaskAnnotations {
        segment_boundaries: starts[1..].to_vec(),
        segment_captions: captions,
        ..Default::default()
    };
    annotations.validate(duration_s)?;
    Ok(StreamSample {
        sample_id: format!("narration-{rng_seed:08x}"),
        task: TaskKind::Narration,
        duration_s,
        dims,
        video_frames: video,
        audio_features: audio,
        annotations,
    })
}

/// Reactive-QA stream: embeds a queried property (which signature appeared,
/// or the ordinal slot of a signature), with the query placed after the
/// evidence.
pub fn generate_qa_stream(
    duration_s: usize,
    dims: FeatureDims,
    rng_seed: u64,
) -> Result<StreamSample> {
    if duration_s < 8 {
        return Err(CoreError::data("qa stream needs duration_s >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ordinal_kind = rng.gen_bool(0.5);
    let n_events = if ordinal_kind { 2 } else { 1 };
    // Keep room for the query after the last window.
    let windows = place_windows(duration_s - 2, n_events, &mut rng)?;

    let mut dirs = Vec::with_capacity(n_events);
    let first: usize = rng.gen_range(0..N_SIGNATURE_DIRS);
    dirs.push(first);
    if n_events == 2 {
        let mut second = rng.gen_range(0..N_SIGNATURE_DIRS);
        if second == first {
            second = (second + 1) % N_SIGNATURE_DIRS;
        }
        dirs.push(second);
    }

    let (mut video, mut audio) = background(duration_s, &dims, &mut rng);
    for (&(s, e), &dir) in windows.iter().zip(&dirs) {
        let sig_v = signature_from(dims.d_v, dir as u64, 0.3, &mut rng);
        let sig_a = signature_from(dims.d_a, dir as u64, 0.3, &mut rng);
        for t in s..=e {
            add_signature_second(&mut video[t], &mut audio[t], &sig_v, &sig_a);
        }
    }

    let last_end = windows.last().unwrap().1;
    let query_time_s = (last_end + 1).min(duration_s - 2);
    let (query_tokens, answer_tokens, clue_time_s) = if ordinal_kind {
        let j = rng.gen_range(0..2usize);
        (
            vocab::query_ordinal_of(dirs[j]),
            vec![vocab::ordinal_token(j)],
            Some(windows[1].0),
        )
    } else {
        (
            vocab::query_which_signature(),
            vec![vocab::dir_token(dirs[0])],
            Some(windows[0].0),
        )
    };

    let annotations = TaskAnnotations {
        event_windows: windows,
        event_dirs: dirs,
        query_time_s: Some(query_time_s),
        query_tokens,
        answer_tokens,
        clue_time_s,
        ..Default::default()
    };
    annotations.validate(duration_s)?;
    Ok(StreamSample {
        sample_id: format!("qa-{rng_seed:08x}"),
        task: TaskKind::ReactiveQa,
        duration_s,
        dims,
        video_frames: video,
        audio_features: audio,
        annotations,
    })
}

// ---------------------------------------------------------------------------
// Labels and statistics
// ---------------------------------------------------------------------------

/// Per-unit trigger labels derived from the task annotations.
///
/// Alerts mark every second inside an event window positive; narration
/// marks exactly the transition seconds; reactive QA is all zeros (timing
/// is query-driven).
pub fn label_timing(sample: &StreamSample) -> Result<TimingLabels> {
    let t_len = sample.duration_s;
    let ann = &sample.annotations;
    let z = match sample.task {
        TaskKind::Alert => {
            let mut z = vec![0u8; t_len];
            for &(s, e) in &ann.event_windows {
                for t in s..=e.min(t_len - 1) {
                    z[t] = 1;
                }
            }
            z
        }
        TaskKind::Narration => {
            if ann.segment_boundaries.is_empty() {
                return Err(CoreError::data(
                    "narration sample missing segment boundaries",
                ));
            }
            let mut z = vec![0u8; t_len];
            for &b in &ann.segment_boundaries {
                z[b] = 1;
            }
            z
        }
        TaskKind::ReactiveQa => {
            if ann.query_time_s.is_none() {
                return Err(CoreError::data("reactive sample missing query time"));
            }
            vec![0u8; t_len]
        }
    };
    Ok(TimingLabels { z })
}

/// Positive-class weight N_neg / N_pos pooled over every unit in the
/// dataset.
pub fn compute_pos_weight(samples: &[StreamSample]) -> Result<f64> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for sample in samples {
        let labels = label_timing(sample)?;
        pos += labels.positives();
        neg += labels.z.len() - labels.positives();
    }
    if pos == 0 {
        return Err(CoreError::data(
            "pos weight undefined: dataset has no positive labels",
        ));
    }
    Ok(neg as f64 / pos as f64)
}

// ---------------------------------------------------------------------------
// Serialization: line-delimited records
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        sample_id: String,
        task: TaskKind,
        duration_s: usize,
        dims: FeatureDims,
        annotations: TaskAnnotations,
    },
    Second {
        t: usize,
        frames: Vec<Vec<Vec<f64>>>,
        audio: Vec<Vec<f64>>,
        label: u8,
    },
}

impl StreamSample {
    pub fn validate(&self) -> Result<()> {
        if self.video_frames.len() != self.duration_s || self.audio_features.len() != self.duration_s {
            return Err(CoreError::data("per-second feature count != duration"));
        }
        for (t, (v, a)) in self.video_frames.iter().zip(&self.audio_features).enumerate() {
            if v.len() != FRAMES_PER_SECOND {
                return Err(CoreError::data(format!("second {t}: frame count != 2")));
            }
            if a.len() != AUDIO_PER_SECOND {
                return Err(CoreError::data(format!("second {t}: audio count != 25")));
            }
            for grid in v {
                if grid.len() != self.dims.grid_h * self.dims.grid_w
                    || grid.iter().any(|c| c.len() != self.dims.d_v)
                {
                    return Err(CoreError::data(format!("second {t}: bad video grid shape")));
                }
            }
            if a.iter().any(|x| x.len() != self.dims.d_a) {
                return Err(CoreError::data(format!("second {t}: bad audio dim")));
            }
        }
        self.annotations.validate(self.duration_s)
    }

    /// Serialize as line-delimited records: one header, then one record per
    /// second carrying features and the timing label.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let labels = label_timing(self)?;
        let header = Record::Header {
            sample_id: self.sample_id.clone(),
            task: self.task,
            duration_s: self.duration_s,
            dims: self.dims,
            annotations: self.annotations.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in 0..self.duration_s {
            let rec = Record::Second {
                t,
                frames: self.video_frames[t].clone(),
                audio: self.audio_features[t].clone(),
                label: labels.z[t],
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf8"))
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<StreamSample> {
        let mut header: Option<(String, TaskKind, usize, FeatureDims, TaskAnnotations)> = None;
        let mut video = Vec::new();
        let mut audio = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line)? {
                Record::Header { sample_id, task, duration_s, dims, annotations } => {
                    header = Some((sample_id, task, duration_s, dims, annotations));
                }
                Record::Second { t, frames, audio: a, .. } => {
                    if t != video.len() {
                        return Err(CoreError::data(format!(
                            "second records out of order at t={t}"
                        )));
                    }
                    video.push(frames);
                    audio.push(a);
                }
            }
        }
        let (sample_id, task, duration_s, dims, annotations) =
            header.ok_or_else(|| CoreError::data("stream file missing header record"))?;
        let sample = StreamSample {
            sample_id,
            task,
            duration_s,
            dims,
            video_frames: video,
            audio_features: audio,
            annotations,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<StreamSample> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}

/// Load every `*.jsonl` stream in a directory, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<StreamSample>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| StreamSample::load(p)).collect()
}
