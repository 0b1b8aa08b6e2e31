//! On-disk corpus format, loaders, and the synthetic planted-alignment
//! generator.
//!
//! A corpus is a `manifest.json` plus one binary blob per video and per
//! query. Blobs are little-endian 32-bit floats, row-major: videos are
//! `[num_frames, C+1, d]` grids (slot 0 of the middle axis is the global
//! frame feature), queries are `[num_words, d]` word matrices. Timestamps
//! in the manifest are seconds; `frames_per_second` maps them to frame
//! units.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// A (start, end) interval in frame units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Self {
        Segment { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }
}

/// Intersection over union of two segments. Disjoint segments score 0;
/// a zero-length segment scores 0 against everything except an identical
/// point, which scores 1 (avoids 0/0).
pub fn compute_iou(a: Segment, b: Segment) -> f64 {
    debug_assert!(a.start <= a.end && b.start <= b.end, "segments must be ordered");
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        // Both degenerate points.
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub num_frames: usize,
    /// Blob path relative to the manifest.
    pub blob: String,
}

/// One video-query pair: the query side plus its ground-truth segment in
/// seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub video_id: String,
    pub num_words: usize,
    pub blob: String,
    pub t_s: f64,
    pub t_e: f64,
}

fn default_fps() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Feature dimension d, identical across entries.
    pub d: usize,
    /// Patch count C, identical across entries.
    #[serde(rename = "C")]
    pub c: usize,
    /// Maps manifest seconds to frame indices. The source datasets never
    /// state their stride, so it travels with the data instead.
    #[serde(default = "default_fps")]
    pub frames_per_second: f64,
    pub videos: Vec<VideoRecord>,
    pub queries: Vec<PairRecord>,
}

/// Per-pair frame/patch grid, `[N_v, C+1, d]`, slot 0 global.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub grid: Array3<f64>,
}

impl VideoFeatures {
    pub fn num_frames(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Global frame vectors, `[N_v, d]` (slot 0 of each frame).
    pub fn globals(&self) -> Array2<f64> {
        self.grid.index_axis(ndarray::Axis(1), 0).to_owned()
    }

    /// Full rows of frame `i`, `[C+1, d]`.
    pub fn frame(&self, i: usize) -> Array2<f64> {
        self.grid.index_axis(ndarray::Axis(0), i).to_owned()
    }
}

/// Word-level features of one query, `[N_q, d]`. The sentence-level vector
/// is not stored; the query encoder derives it by its pooling rule.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub words: Array2<f64>,
}

/// A fully loaded corpus: manifest metadata plus feature arrays, videos in
/// manifest order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dim: usize,
    pub patch_count: usize,
    pub frames_per_second: f64,
    pub video_ids: Vec<String>,
    pub videos: Vec<VideoFeatures>,
    pub pairs: Vec<PairRecord>,
    pub queries: Vec<QueryFeatures>,
    video_index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn video_index_of(&self, video_id: &str) -> Option<usize> {
        self.video_index.get(video_id).copied()
    }

    pub fn video_of_pair(&self, pair_idx: usize) -> usize {
        self.video_index[&self.pairs[pair_idx].video_id]
    }

    /// Ground-truth segment of a pair in frame units.
    pub fn gt_segment(&self, pair_idx: usize) -> Segment {
        let p = &self.pairs[pair_idx];
        Segment::new(p.t_s * self.frames_per_second, p.t_e * self.frames_per_second)
    }

    /// Pairs grouped per video in manifest video order; within a video the
    /// pairs are ordered by ground-truth start time (the rank order the
    /// cross-sentence position embedding uses).
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut by_video: Vec<Vec<usize>> = vec![Vec::new(); self.videos.len()];
        for (i, p) in self.pairs.iter().enumerate() {
            by_video[self.video_index[&p.video_id]].push(i);
        }
        let mut out = Vec::new();
        for (v, mut pairs) in by_video.into_iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            pairs.sort_by(|&a, &b| {
                self.pairs[a]
                    .t_s
                    .partial_cmp(&self.pairs[b].t_s)
                    .unwrap()
                    .then(self.pairs[a].id.cmp(&self.pairs[b].id))
            });
            out.push((v, pairs));
        }
        out
    }
}

fn read_f32_blob(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected {} bytes ({} little-endian f32), found {}",
            path.display(),
            expected_len * 4,
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn write_f32_blob(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read and validate a manifest without touching blobs.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.display().to_string()))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &CorpusManifest) -> Result<()> {
    if m.d == 0 || m.frames_per_second <= 0.0 {
        return Err(Error::InvalidConfig(
            "manifest d must be >= 1 and frames_per_second > 0".into(),
        ));
    }
    let mut ids = BTreeMap::new();
    for v in &m.videos {
        if v.num_frames == 0 {
            return Err(Error::InvalidConfig(format!("video {} has zero frames", v.id)));
        }
        if ids.insert(v.id.clone(), ()).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate video id {}", v.id)));
        }
    }
    for q in &m.queries {
        if q.num_words == 0 {
            return Err(Error::InvalidConfig(format!("query {} has zero words", q.id)));
        }
        let video = m
            .videos
            .iter()
            .find(|v| v.id == q.video_id)
            .ok_or_else(|| Error::InvalidConfig(format!("query {} references unknown video {}", q.id, q.video_id)))?;
        let duration = video.num_frames as f64 / m.frames_per_second;
        if !(q.t_s >= 0.0 && q.t_s < q.t_e && q.t_e <= duration + 1e-9) {
            return Err(Error::BadTimestamps {
                query_id: q.id.clone(),
                t_s: q.t_s,
                t_e: q.t_e,
                duration,
            });
        }
    }
    Ok(())
}

/// Load a manifest and every referenced blob, checking byte lengths against
/// the declared shapes.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let d = manifest.d;
    let c = manifest.c;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    let mut video_ids = Vec::with_capacity(manifest.videos.len());
    let mut video_index = BTreeMap::new();
    for (i, v) in manifest.videos.iter().enumerate() {
        let data = read_f32_blob(&root.join(&v.blob), v.num_frames * (c + 1) * d)?;
        let grid = Array3::from_shape_vec((v.num_frames, c + 1, d), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        videos.push(VideoFeatures { grid });
        video_ids.push(v.id.clone());
        video_index.insert(v.id.clone(), i);
    }

    let mut queries = Vec::with_capacity(manifest.queries.len());
    for q in &manifest.queries {
        let data = read_f32_blob(&root.join(&q.blob), q.num_words * d)?;
        let words = Array2::from_shape_vec((q.num_words, d), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        queries.push(QueryFeatures { words });
    }

    Ok(Corpus {
        dim: d,
        patch_count: c,
        frames_per_second: manifest.frames_per_second,
        video_ids,
        videos,
        pairs: manifest.queries,
        queries,
    video_index,
    })
}

/// Write a corpus (blobs under `videos/` and `queries/`, manifest at
/// `manifest.json`) and return the manifest path.
pub fn write_corpus(
    dir: &Path,
    manifest: &CorpusManifest,
    videos: &[VideoFeatures],
    queries: &[QueryFeatures],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("videos"))?;
    std::fs::create_dir_all(dir.join("queries"))?;
    for (rec, feat) in manifest.videos.iter().zip(videos) {
        write_f32_blob(&dir.join(&rec.blob), feat.grid.as_slice().unwrap())?;
    }
    for (rec, feat) in manifest.queries.iter().zip(queries) {
        write_f32_blob(&dir.join(&rec.blob), feat.words.as_slice().unwrap())?;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(path)
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Generate a synthetic corpus with planted alignments and write it under
/// `dir`.
///
/// Each query draws a unit latent direction; the words of the query and the
/// frames of its target segment share that latent at `cfg.signal_weight`,
/// with i.i.d. gaussian noise at `cfg.noise_weight` everywhere. Segments of
/// one video occupy disjoint chunks, so distinct segments carry distinct
/// latents. The same seed reproduces byte-identical blobs; values are
/// rounded through f32 before use so the in-memory corpus equals the
/// on-disk one exactly.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_videos: usize,
    queries_per_video: usize,
    cfg: &ModelConfig,
    dir: &Path,
) -> Result<Corpus> {
    if n_videos < 2 || queries_per_video < 1 {
        return Err(Error::InvalidConfig(
            "need n_videos >= 2 and queries_per_video >= 1".into(),
        ));
    }
    let n_v = cfg.frames_per_video;
    let chunk = n_v / queries_per_video;
    if chunk < 1 {
        return Err(Error::InvalidConfig(format!(
            "cannot fit {queries_per_video} segments into {n_v} frames"
        )));
    }
    let d = cfg.feature_dim;
    let c = cfg.patches_per_frame;
    let n_q = cfg.words_per_query;
    let fps = 1.0;

    let round = |x: f64| f64::from(x as f32);
    let mut manifest = CorpusManifest {
        d,
        c,
        frames_per_second: fps,
        videos: Vec::new(),
        queries: Vec::new(),
    };
    let mut videos = Vec::new();
    let mut queries = Vec::new();

    for vi in 0..n_videos {
        let video_id = format!("v{vi:04}");
        let mut grid = Array3::zeros((n_v, c + 1, d));
        let mut noise_rng = stream_rng(seed, &format!("synth/video/{vi}/noise"));
        for f in 0..n_v {
            for s in 0..=c {
                for k in 0..d {
                    let e: f64 = noise_rng.sample(StandardNormal);
                    grid[[f, s, k]] = cfg.noise_weight * e;
                }
            }
        }

        for qi in 0..queries_per_video {
            let query_id = format!("v{vi:04}_q{qi}");
            let mut seg_rng = stream_rng(seed, &format!("synth/segment/{vi}/{qi}"));
            let len = seg_rng.gen_range(1..=chunk);
            let start = qi * chunk + seg_rng.gen_range(0..=chunk - len);
            let end = start + len;
            let latent = unit_vector(&mut seg_rng, d);

            for f in start..end {
                for s in 0..=c {
                    for k in 0..d {
                        grid[[f, s, k]] += cfg.signal_weight * latent[k];
                    }
                }
            }

            let mut word_rng = stream_rng(seed, &format!("synth/query/{vi}/{qi}"));
            let mut words = Array2::zeros((n_q, d));
            for w in 0..n_q {
                for k in 0..d {
                    let e: f64 = word_rng.sample(StandardNormal);
                    words[[w, k]] = round(cfg.signal_weight * latent[k] + cfg.noise_weight * e);
                }
            }

            manifest.queries.push(PairRecord {
                id: query_id.clone(),
                video_id: video_id.clone(),
                num_words: n_q,
                blob: format!("queries/{query_id}.bin"),
                t_s: start as f64 / fps,
                t_e: end as f64 / fps,
            });
            queries.push(QueryFeatures { words });
        }

        grid.mapv_inplace(round);
        manifest.videos.push(VideoRecord {
            id: video_id.clone(),
            num_frames: n_v,
            blob: format!("videos/{video_id}.bin"),
        });
        videos.push(VideoFeatures { grid });
    }

    let path = write_corpus(dir, &manifest, &videos, &queries)?;
    load_manifest(&path)
}
