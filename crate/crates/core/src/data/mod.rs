//! Traffic movies, sample extraction, masks and scoring.
//!
//! A movie is a `(T, H, W, 8)` byte tensor of 5-minute bins. Channel pairs
//! `(2k, 2k + 1)` hold (volume, speed) for the headings in [`HEADINGS`].

mod gcmv;
mod synth;

pub use gcmv::{
    decode_frames, decode_tensor, encode_frames, encode_tensor, import_raw, read_gcmv, read_mask,
    write_gcmv, write_mask, GCMV_MAGIC, GCMV_VERSION,
};
pub use synth::{synth_city, synth_city_with, road_skeleton, Profile, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub const HEADINGS: [&str; 4] = ["NE", "SE", "SW", "NW"];
pub const CHANNELS: usize = 8;
pub const FRAMES_PER_DAY: usize = 288;
pub const BIN_MINUTES: usize = 5;
pub const INPUT_FRAMES: usize = 12;
/// Input frames plus the furthest target offset.
pub const WINDOW: usize = 24;
/// Target offsets after the last input frame: 5, 10, 15, 30, 45, 60 minutes.
pub const SIX_OFFSETS: [usize; 6] = [1, 2, 3, 6, 9, 12];

/// Row-major `(T, H, W, C)` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frames {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl Frames {
    pub fn new(data: Vec<u8>, shape: [usize; 4]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(shape_err!("{} bytes do not fill shape {:?}", data.len(), shape));
        }
        Ok(Frames { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Frames {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn index(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        let [_, hh, ww, cc] = self.shape;
        ((t * hh + h) * ww + w) * cc + c
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> u8 {
        self.data[self.index(t, h, w, c)]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn slice_time(&self, start: usize, end: usize) -> Result<Frames> {
        if start > end || end > self.shape[0] {
            return Err(shape_err!("time range {start}..{end} outside 0..{}", self.shape[0]));
        }
        let n = self.frame_len();
        Ok(Frames {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Stacks the listed frames in order.
    pub fn select_frames(&self, ts: &[usize]) -> Result<Frames> {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(ts.len() * n);
        for &t in ts {
            if t >= self.shape[0] {
                return Err(shape_err!("frame {t} outside 0..{}", self.shape[0]));
            }
            data.extend_from_slice(self.frame(t));
        }
        Ok(Frames {
            shape: [ts.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        })
    }

    pub fn concat_time(parts: &[&Frames]) -> Result<Frames> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Degenerate("no frames to concatenate".into()))?;
        let mut data = Vec::new();
        let mut t = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(shape_err!("cannot concatenate {:?} with {:?}", p.shape, first.shape));
            }
            data.extend_from_slice(&p.data);
            t += p.shape[0];
        }
        Ok(Frames {
            shape: [t, first.shape[1], first.shape[2], first.shape[3]],
            data,
        })
    }

    pub fn normalize<E: Element>(&self) -> Tensor<E> {
        let data = self.data.iter().map(|&b| normalize_byte(b)).collect();
        Tensor::from_vec(data, &self.shape).expect("frames shape")
    }

    pub fn denormalize<E: Element>(t: &Tensor<E>) -> Result<Frames> {
        let shape: [usize; 4] = t
            .shape()
            .try_into()
            .map_err(|_| shape_err!("expected a rank-4 tensor, got {:?}", t.shape()))?;
        Frames::new(t.data().iter().map(|&x| denormalize_value(x)).collect(), shape)
    }
}

pub fn normalize_byte<E: Element>(b: u8) -> E {
    E::from_f64_lossy(b as f64 / 255.0)
}

pub fn denormalize_value<E: Element>(x: E) -> u8 {
    let v = (x.to_f64_lossy() * 255.0).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

/// One city-year recording, possibly spanning many days.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMovie {
    pub city: String,
    pub year: u16,
    pub frames: Frames,
    pub frames_per_day: usize,
}

impl TrafficMovie {
    pub fn new(city: impl Into<String>, year: u16, frames: Frames) -> Self {
        TrafficMovie {
            city: city.into(),
            year,
            frames,
            frames_per_day: FRAMES_PER_DAY,
        }
    }

    pub fn days(&self) -> usize {
        self.frames.len().div_ceil(self.frames_per_day.max(1))
    }

    /// Frame ranges of each day; the last one may be partial.
    pub fn day_ranges(&self) -> Vec<(usize, usize)> {
        let per = self.frames_per_day.max(1);
        let t = self.frames.len();
        (0..t).step_by(per).map(|s| (s, (s + per).min(t))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Nonoverlap,
    Overlap { stride: usize },
}

impl Strategy {
    /// Window starts inside one day of `t` frames.
    pub fn starts(self, t: usize) -> Vec<usize> {
        if t < WINDOW {
            return Vec::new();
        }
        match self {
            Strategy::Nonoverlap => (0..t / WINDOW).map(|k| k * WINDOW).collect(),
            Strategy::Overlap { stride } => (0..=t - WINDOW).step_by(stride.max(1)).collect(),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Strategy::Overlap { stride: 0 } => Err(Error::Config("overlap stride must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    Six,
    Twelve,
}

impl FrameMode {
    pub fn offsets(self) -> Vec<usize> {
        match self {
            FrameMode::Six => SIX_OFFSETS.to_vec(),
            FrameMode::Twelve => (1..=12).collect(),
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            FrameMode::Six => 6,
            FrameMode::Twelve => 12,
        }
    }

    pub fn for_outputs(n: usize) -> Result<Self> {
        match n {
            6 => Ok(FrameMode::Six),
            12 => Ok(FrameMode::Twelve),
            _ => Err(Error::Config(format!("no frame mode predicts {n} frames"))),
        }
    }
}

/// Where a sample window starts: movie, then absolute frame index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub movie: usize,
    pub start: usize,
}

#[derive(Debug, Clone)]
pub struct SamplePair<E: Element> {
    pub input: Tensor<E>,
    pub target: Tensor<E>,
    pub origin: SampleOrigin,
}

/// A movie left out of sampling because a day was shorter than one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedSegment {
    pub movie: usize,
    pub start: usize,
    pub frames: usize,
}

/// All window origins, in movie then time order.
pub fn sample_origins(
    movies: &[TrafficMovie],
    strategy: Strategy,
) -> (Vec<SampleOrigin>, Vec<SkippedSegment>) {
    let mut origins = Vec::new();
    let mut skipped = Vec::new();
    for (m, movie) in movies.iter().enumerate() {
        for (s, e) in movie.day_ranges() {
            if e - s < WINDOW {
                log::warn!(
                    "{} {}: segment at frame {s} has {} frames, fewer than {WINDOW}; skipped",
                    movie.city,
                    movie.year,
                    e - s
                );
                skipped.push(SkippedSegment { movie: m, start: s, frames: e - s });
                continue;
            }
            origins.extend(strategy.starts(e - s).into_iter().map(|k| SampleOrigin { movie: m, start: s + k }));
        }
    }
    (origins, skipped)
}

pub fn make_pair<E: Element>(
    movies: &[TrafficMovie],
    origin: SampleOrigin,
    mode: FrameMode,
) -> Result<SamplePair<E>> {
    let movie = movies
        .get(origin.movie)
        .ok_or_else(|| Error::Config(format!("no movie {}", origin.movie)))?;
    let f = &movie.frames;
    let input = f.slice_time(origin.start, origin.start + INPUT_FRAMES)?;
    let last = origin.start + INPUT_FRAMES - 1;
    let ts: Vec<usize> = mode.offsets().iter().map(|o| last + o).collect();
    let target = f.select_frames(&ts)?;
    Ok(SamplePair {
        input: input.normalize(),
        target: target.normalize(),
        origin,
    })
}

/// Lazily materialized sample pairs.
pub struct SampleIter<'a, E: Element> {
    movies: &'a [TrafficMovie],
    origins: std::vec::IntoIter<SampleOrigin>,
    mode: FrameMode,
    _e: std::marker::PhantomData<E>,
}

impl<E: Element> Iterator for SampleIter<'_, E> {
    type Item = Result<SamplePair<E>>;

    fn next(&mut self) -> Option<Self::Item> {
        let o = self.origins.next()?;
        Some(make_pair(self.movies, o, self.mode))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.origins.size_hint()
    }
}

pub fn extract_samples<'a, E: Element>(
    movies: &'a [TrafficMovie],
    strategy: Strategy,
    mode: FrameMode,
) -> (SampleIter<'a, E>, Vec<SkippedSegment>) {
    let (origins, skipped) = sample_origins(movies, strategy);
    (
        SampleIter {
            movies,
            origins: origins.into_iter(),
            mode,
            _e: std::marker::PhantomData,
        },
        skipped,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Training,
    Test,
}

/// Per-pixel road indicator, `(H, W)` of 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub source: MaskSource,
}

impl Mask {
    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
            source: MaskSource::Test,
        }
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.data[h * self.width + w] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err!("mask sizes differ"));
        }
        Ok(Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
            ..self.clone()
        })
    }
}

/// A pixel is on the road if any frame and any channel is nonzero there.
pub fn derive_mask(frames: &Frames, source: MaskSource) -> Result<Mask> {
    let [t, h, w, c] = frames.shape();
    if frames.is_empty() {
        return Err(Error::Degenerate(format!("cannot derive a mask from {:?}", frames.shape())));
    }
    let mut data = vec![0u8; h * w];
    for ti in 0..t {
        let frame = frames.frame(ti);
        for (p, px) in frame.chunks_exact(c).enumerate() {
            if data[p] == 0 && px.iter().any(|&v| v != 0) {
                data[p] = 1;
            }
        }
    }
    Ok(Mask { height: h, width: w, data, source })
}

fn check_mask_dims(shape: &[usize], mask: &Mask) -> Result<()> {
    if shape.len() != 4 || shape[1] != mask.height || shape[2] != mask.width {
        return Err(shape_err!(
            "mask {}x{} does not fit {:?}",
            mask.height,
            mask.width,
            shape
        ));
    }
    Ok(())
}

/// Zeroes every off-mask pixel of a `(T, H, W, C)` tensor.
pub fn apply_mask<E: Element>(pred: &Tensor<E>, mask: &Mask) -> Result<Tensor<E>> {
    check_mask_dims(pred.shape(), mask)?;
    let c = pred.shape()[3];
    let hw = mask.height * mask.width;
    let mut data = pred.to_vec();
    for (i, px) in data.chunks_exact_mut(c).enumerate() {
        if mask.data[i % hw] == 0 {
            px.iter_mut().for_each(|v| *v = E::zero());
        }
    }
    Tensor::from_vec(data, pred.shape())
}

pub fn apply_mask_frames(frames: &Frames, mask: &Mask) -> Result<Frames> {
    check_mask_dims(&frames.shape(), mask)?;
    let c = frames.shape()[3];
    let hw = mask.height * mask.width;
    let mut out = frames.clone();
    for (i, px) in out.data.chunks_exact_mut(c).enumerate() {
        if mask.data[i % hw] == 0 {
            px.fill(0);
        }
    }
    Ok(out)
}

/// Mean squared error on the raw 0-255 scale.
pub fn score(pred: &Frames, truth: &Frames) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(shape_err!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("cannot score empty frames".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / pred.data().len() as f64)
}
