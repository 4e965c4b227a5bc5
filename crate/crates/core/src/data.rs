//! Deterministic synthetic clips: one moving shape over Gaussian noise.
//!
//! Class 0 is a filled square, class 1 a plus-shaped cross, class 2 a
//! horizontal bar. Each clip draws a size, a start position and an integer
//! per-frame velocity; positions wrap so the shape always stays fully
//! inside the frame. The label depends on the shape only.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FRAME_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const NOISE_SIGMA: f64 = 0.1;
pub const BACKGROUND_LEVEL: f64 = 0.1;
pub const SHAPE_LEVEL: f64 = 0.3;
const BAR_THICKNESS: usize = 3;
const MAX_SPEED: i64 = 2;

/// Half-open pixel rectangle `[w0, w1) × [h0, h1)` (`w` indexes rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalientBox {
    pub w0: usize,
    pub h0: usize,
    pub w1: usize,
    pub h1: usize,
}

impl SalientBox {
    pub fn area(&self) -> usize {
        (self.w1 - self.w0) * (self.h1 - self.h0)
    }

    pub fn contains(&self, w: usize, h: usize) -> bool {
        (self.w0..self.w1).contains(&w) && (self.h0..self.h1).contains(&h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Eval => 0x6576_616c_0000_0002,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    /// `K×32×32×1`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub boxes: Vec<SalientBox>,
}

impl ClipSample {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the listed frames (and their boxes) into a new clip.
    pub fn select_frames(&self, indices: &[usize]) -> ClipSample {
        let inner = FRAME_SIZE * FRAME_SIZE;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.frames.data()[i * inner..(i + 1) * inner]);
        }
        ClipSample {
            frames: Tensor::new(&[indices.len(), FRAME_SIZE, FRAME_SIZE, 1], data)
                .expect("frame selection"),
            label: self.label,
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one clip of one split.
pub fn clip_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ split.tag()) ^ index))
}

/// Shape mask of the given class and size, as `(rows, cols, mask)`.
fn shape_mask(class: usize, size: usize) -> (usize, usize, Vec<bool>) {
    match class {
        0 => (size, size, vec![true; size * size]),
        1 => {
            let t = 2 + size % 2;
            let lo = (size - t) / 2;
            let mut m = vec![false; size * size];
            for r in 0..size {
                for c in 0..size {
                    m[r * size + c] = (lo..lo + t).contains(&r) || (lo..lo + t).contains(&c);
                }
            }
            (size, size, m)
        }
        2 => (BAR_THICKNESS, size, vec![true; BAR_THICKNESS * size]),
        _ => unreachable!("class out of range"),
    }
}

/// Generates `frames` frames of class `class` from `rng`.
pub fn generate_clip<R: Rng + ?Sized>(
    rng: &mut R,
    class: usize,
    frames: usize,
) -> Result<ClipSample> {
    if frames == 0 {
        return Err(Error::Parameter("clip needs at least one frame".into()));
    }
    if class >= NUM_CLASSES {
        return Err(Error::Contract(format!("class {class} out of range")));
    }
    let size = rng.random_range(6..=10usize);
    let (rows, cols, mask) = shape_mask(class, size);
    let span_w = (FRAME_SIZE - rows + 1) as i64;
    let span_h = (FRAME_SIZE - cols + 1) as i64;
    let start_w = rng.random_range(0..span_w);
    let start_h = rng.random_range(0..span_h);
    let vel_w = rng.random_range(-MAX_SPEED..=MAX_SPEED);
    let vel_h = rng.random_range(-MAX_SPEED..=MAX_SPEED);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let inner = FRAME_SIZE * FRAME_SIZE;
    let mut data = vec![0.0; frames * inner];
    let mut boxes = Vec::with_capacity(frames);
    for k in 0..frames {
        let w0 = (start_w + vel_w * k as i64).rem_euclid(span_w) as usize;
        let h0 = (start_h + vel_h * k as i64).rem_euclid(span_h) as usize;
        let b = SalientBox {
            w0,
            h0,
            w1: w0 + rows,
            h1: h0 + cols,
        };
        let frame = &mut data[k * inner..(k + 1) * inner];
        for w in 0..FRAME_SIZE {
            for h in 0..FRAME_SIZE {
                let on = b.contains(w, h) && mask[(w - w0) * cols + (h - h0)];
                let base = if on { SHAPE_LEVEL } else { BACKGROUND_LEVEL };
                frame[w * FRAME_SIZE + h] = (base + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        boxes.push(b);
    }
    Ok(ClipSample {
        frames: Tensor::new(&[frames, FRAME_SIZE, FRAME_SIZE, 1], data)?,
        label: class,
        boxes,
    })
}

/// Clip `index` of a split; labels are assigned round-robin.
pub fn corpus_clip(seed: u64, split: Split, index: u64, frames: usize) -> Result<ClipSample> {
    let mut rng = clip_rng(seed, split, index);
    generate_clip(&mut rng, (index % NUM_CLASSES as u64) as usize, frames)
}

/// Generates clips `0..count`, optionally on several threads. The result
/// is identical for every worker count.
pub fn generate_corpus(
    seed: u64,
    split: Split,
    count: usize,
    frames: usize,
    workers: usize,
) -> Result<Vec<ClipSample>> {
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count as u64)
            .map(|i| corpus_clip(seed, split, i, frames))
            .collect();
    }
    let chunk = count.div_ceil(workers);
    let parts: Vec<Result<Vec<ClipSample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    let lo = (w * chunk).min(count);
                    let hi = ((w + 1) * chunk).min(count);
                    (lo as u64..hi as u64)
                        .map(|i| corpus_clip(seed, split, i, frames))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// SHA-256 over labels and frame bytes, hex encoded.
pub fn corpus_hash(clips: &[ClipSample]) -> String {
    let mut h = Sha256::new();
    for c in clips {
        h.update([c.label as u8]);
        for v in c.frames.data() {
            h.update(v.to_le_bytes());
        }
    }
    to_hex(&h.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const CORPUS_MAGIC: &[u8; 9] = b"ISTPA-DS1";

/// Writes `magic, K, count, classes` (LE u32) then per clip a label byte
/// and `K·32·32` LE f64 pixels.
pub fn write_corpus<W: Write>(mut out: W, clips: &[ClipSample]) -> std::io::Result<()> {
    let k = clips.first().map_or(0, |c| c.len());
    out.write_all(CORPUS_MAGIC)?;
    for v in [k as u32, clips.len() as u32, NUM_CLASSES as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for c in clips {
        if c.len() != k {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "clips in one split must share a frame count",
            ));
        }
        out.write_all(&[c.label as u8])?;
        for v in c.frames.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a corpus written by [`write_corpus`]. Boxes are not stored and
/// come back empty.
pub fn read_corpus<R: Read>(mut input: R) -> Result<(usize, Vec<(usize, Tensor)>)> {
    let bad = |m: &str| Error::Integrity(format!("corpus: {m}"));
    let mut magic = [0u8; 9];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("short header"))?;
    if &magic != CORPUS_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    let mut header = [0usize; 3];
    for h in &mut header {
        input
            .read_exact(&mut word)
            .map_err(|_| bad("short header"))?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [k, count, classes] = header;
    let inner = k * FRAME_SIZE * FRAME_SIZE;
    let mut clips = Vec::with_capacity(count);
    let mut buf = vec![0u8; inner * 8];
    for _ in 0..count {
        let mut label = [0u8; 1];
        input.read_exact(&mut label).map_err(|_| bad("truncated"))?;
        input.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        let data = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        clips.push((
            label[0] as usize,
            Tensor::new(&[k, FRAME_SIZE, FRAME_SIZE, 1], data)?,
        ));
    }
    Ok((classes, clips))
}

pub fn export_corpus(path: &Path, clips: &[ClipSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, clips).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
