//! Synthetic moving-shapes corpus.
//!
//! Each video shows one colored shape drifting across a dark background on a
//! torus (positions wrap), so a single frame carries no information about the
//! motion direction but any two frames do. Captions follow the fixed grammar
//! `<color> <shape> moves <direction> <speed>`; three QA pairs ask for the
//! color, the shape and the direction. The image variant renders one frame
//! and captions it `<color> <shape>` for image-text pretraining.
//!
//! On disk a dataset is `manifest.json` plus `records.bin` (little-endian,
//! raw frames, offsets in the manifest). Generation is deterministic:
//! identical (spec, seed) gives byte-identical files. Train/val/test splits
//! partition the (color, shape, direction) combinations, so held-out
//! examples are unseen attribute triples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::sampling::{
    resize_zero_pad, sample_eval_clips, sample_train_clips, ClipWindow, SamplingPlan,
};
use crate::{Error, Result};

pub const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [60, 90, 230]),
    ("yellow", [235, 220, 50]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// (name, (dx, dy)); y grows downward.
pub const DIRECTIONS: [(&str, (i64, i64)); 4] = [
    ("left", (-1, 0)),
    ("right", (1, 0)),
    ("up", (0, -1)),
    ("down", (0, 1)),
];

/// (name, pixels per frame).
pub const SPEEDS: [(&str, i64); 2] = [("slowly", 2), ("quickly", 3)];

/// How far the shape fades toward white by the last frame (fraction of 256).
/// The fade is a per-frame time code carried by the shape itself: one frame
/// alone says nothing about the motion direction, but any two frames are
/// ordered by it, which is what makes direction decodable through an
/// order-symmetric temporal fusion (an unordered pair of torus positions has
/// no sign).
pub const WHITEN_MAX_256: i64 = 128;

pub const BACKGROUNDS: [[u8; 3]; 4] = [
    [16, 16, 16],
    [26, 26, 28],
    [20, 23, 20],
    [31, 29, 28],
];

/// Distinct (color, shape, direction) combinations.
pub const COMBO_COUNT: usize = COLORS.len() * SHAPES.len() * DIRECTIONS.len();

/// Answer candidates: colors, then shapes, then directions.
pub fn answer_names() -> Vec<String> {
    COLORS
        .iter()
        .map(|(n, _)| n.to_string())
        .chain(SHAPES.iter().map(|n| n.to_string()))
        .chain(DIRECTIONS.iter().map(|(n, _)| n.to_string()))
        .collect()
}

pub const NUM_ANSWERS: usize = 12;

/// Everything needed to re-render a video pixel for pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub shape: u8,
    pub color: u8,
    pub direction: u8,
    pub speed: u8,
    pub background: u8,
    pub start_x: u8,
    pub start_y: u8,
}

impl SceneDescriptor {
    pub fn combo(&self) -> usize {
        (self.color as usize * SHAPES.len() + self.shape as usize) * DIRECTIONS.len()
            + self.direction as usize
    }
}

/// One frame as a `[3, L, L]` u8 plane. `total_frames` scales the time code
/// so the fade always spans the whole video.
pub fn render_frame(desc: &SceneDescriptor, frame_idx: usize, l: usize, total_frames: usize) -> Vec<u8> {
    let (dx, dy) = DIRECTIONS[desc.direction as usize].1;
    let speed = SPEEDS[desc.speed as usize].1;
    let li = l as i64;
    let cx = (desc.start_x as i64 + dx * speed * frame_idx as i64).rem_euclid(li);
    let cy = (desc.start_y as i64 + dy * speed * frame_idx as i64).rem_euclid(li);
    let r = (l / 4).max(3) as i64;
    let base_color = COLORS[desc.color as usize].1;
    let bg = BACKGROUNDS[desc.background as usize];
    let w256 = if total_frames > 1 {
        WHITEN_MAX_256 * frame_idx.min(total_frames - 1) as i64 / (total_frames - 1) as i64
    } else {
        0
    };
    let color = [
        (base_color[0] as i64 + (255 - base_color[0] as i64) * w256 / 256) as u8,
        (base_color[1] as i64 + (255 - base_color[1] as i64) * w256 / 256) as u8,
        (base_color[2] as i64 + (255 - base_color[2] as i64) * w256 / 256) as u8,
    ];
    let mut out = vec![0u8; 3 * l * l];
    for y in 0..li {
        for x in 0..li {
            // signed torus offsets in [-L/2, L/2)
            let ox = (x - cx + li / 2).rem_euclid(li) - li / 2;
            let oy = (y - cy + li / 2).rem_euclid(li) - li / 2;
            let inside = match desc.shape {
                // filled disc
                0 => ox * ox + oy * oy <= r * r,
                // hollow square: the empty center is what sets it apart
                // from the disc at grid resolution
                1 => {
                    ox.abs() <= r && oy.abs() <= r && ox.abs().max(oy.abs()) >= r * 11 / 20
                }
                // wide-based triangle, apex up
                2 => oy >= -r && oy <= r && 20 * ox.abs() <= 11 * (oy + r),
                // thick plus sign
                _ => (ox.abs() <= r * 2 / 5 && oy.abs() <= r)
                    || (oy.abs() <= r * 2 / 5 && ox.abs() <= r),
            };
            let px = if inside { color } else { bg };
            for c in 0..3 {
                out[(c * l + y as usize) * l + x as usize] = px[c];
            }
        }
    }
    out
}

/// Fixed whitespace vocabulary over the caption/question grammar. Ids 0..3
/// are the special tokens; words start at [`tokens::FIRST_WORD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    entries: Vec<String>,
}

impl Vocab {
    pub fn fixed() -> Self {
        let mut entries = vec![
            "[PAD]".to_string(),
            "[CLS]".to_string(),
            "[SEP]".to_string(),
            "[MASK]".to_string(),
        ];
        for (name, _) in COLORS {
            entries.push(name.to_string());
        }
        for name in SHAPES {
            entries.push(name.to_string());
        }
        entries.push("moves".to_string());
        for (name, _) in DIRECTIONS {
            entries.push(name.to_string());
        }
        for (name, _) in SPEEDS {
            entries.push(name.to_string());
        }
        for w in ["what", "color", "is", "the", "shape", "which", "direction", "does", "it", "move"] {
            entries.push(w.to_string());
        }
        Vocab { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, word: &str) -> u16 {
        self.entries
            .iter()
            .position(|w| w == word)
            .unwrap_or_else(|| panic!("word `{word}` not in the fixed vocabulary")) as u16
    }

    pub fn word(&self, id: u16) -> Option<&str> {
        self.entries.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u16>> {
        text.split_whitespace()
            .map(|w| {
                self.entries
                    .iter()
                    .position(|e| e == w)
                    .map(|i| i as u16)
                    .ok_or_else(|| Error::Input(format!("unknown word `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u16]) -> String {
        ids.iter()
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Multi-frame videos with motion captions.
    Video,
    /// Single-frame images captioned `<color> <shape>`.
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: DataKind,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub fps: u8,
    pub duration_seconds: u8,
    pub frame_size: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            kind: DataKind::Video,
            train_examples: 160,
            val_examples: 48,
            test_examples: 48,
            fps: 8,
            duration_seconds: 2,
            frame_size: 32,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_examples == 0 || self.val_examples == 0 || self.test_examples == 0 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        if self.fps == 0 || self.duration_seconds == 0 {
            return Err(Error::Config("fps and duration must be positive".into()));
        }
        if self.frame_size < 8 || self.frame_size > 255 {
            return Err(Error::Config("frame size must be in [8, 255]".into()));
        }
        Ok(())
    }

    pub fn frames_per_video(&self) -> usize {
        match self.kind {
            DataKind::Video => self.fps as usize * self.duration_seconds as usize,
            DataKind::Image => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub count: usize,
    pub offsets: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DataKind,
    pub frame_size: usize,
    pub fps: u8,
    pub duration_seconds: u8,
    pub seed: u64,
    pub vocab: Vocab,
    pub answer_names: Vec<String>,
    pub splits: BTreeMap<String, SplitIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub question: Vec<u16>,
    pub answer: u16,
}

/// A fully parsed example.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub descriptor: SceneDescriptor,
    pub fps: u8,
    pub frame_size: usize,
    /// Raw frames, each `[3, L, L]`.
    pub frames: Vec<Vec<u8>>,
    pub caption: Vec<u16>,
    pub qa: Vec<QaPair>,
}

impl Record {
    pub fn video_seconds(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }
}

/// Caption word ids for a descriptor. The independent oracle in the tests
/// rebuilds this from literal strings.
pub fn caption_words(vocab: &Vocab, desc: &SceneDescriptor, kind: DataKind) -> Vec<u16> {
    let mut words = vec![
        vocab.id(COLORS[desc.color as usize].0),
        vocab.id(SHAPES[desc.shape as usize]),
    ];
    if let DataKind::Video = kind {
        words.push(vocab.id("moves"));
        words.push(vocab.id(DIRECTIONS[desc.direction as usize].0));
        words.push(vocab.id(SPEEDS[desc.speed as usize].0));
    }
    words
}

/// The QA pairs for a descriptor: color and shape always, direction only for
/// videos (a single image cannot answer it).
pub fn qa_pairs(vocab: &Vocab, desc: &SceneDescriptor, kind: DataKind) -> Vec<QaPair> {
    let mut out = vec![
        QaPair {
            question: vocab.encode("what color is the shape").unwrap(),
            answer: desc.color as u16,
        },
        QaPair {
            question: vocab.encode("what shape is it").unwrap(),
            answer: COLORS.len() as u16 + desc.shape as u16,
        },
    ];
    if let DataKind::Video = kind {
        out.push(QaPair {
            question: vocab.encode("which direction does it move").unwrap(),
            answer: (COLORS.len() + SHAPES.len()) as u16 + desc.direction as u16,
        });
    }
    out
}

/// Deterministic per-example plan: descriptor from the split's combo pool
/// (round-robin over a seeded shuffle) plus random nuisance attributes.
pub fn plan_example(
    combo_pool: &[usize],
    example_idx: usize,
    frame_size: usize,
    rng: &mut Rng,
) -> SceneDescriptor {
    let combo = combo_pool[example_idx % combo_pool.len()];
    let direction = combo % DIRECTIONS.len();
    let shape = (combo / DIRECTIONS.len()) % SHAPES.len();
    let color = combo / (DIRECTIONS.len() * SHAPES.len());
    SceneDescriptor {
        shape: shape as u8,
        color: color as u8,
        direction: direction as u8,
        speed: rng.below(SPEEDS.len()) as u8,
        background: rng.below(BACKGROUNDS.len()) as u8,
        start_x: rng.below(frame_size) as u8,
        start_y: rng.below(frame_size) as u8,
    }
}

/// Splits the combo space disjointly along (color, shape) pairs: a pair
/// lands in exactly one split together with all four directions. Held-out
/// captions are therefore unseen attribute pairs, while the pair itself
/// never predicts the direction, so direction must be read from motion.
pub fn split_combos(seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n_pairs = COLORS.len() * SHAPES.len();
    let mut pairs: Vec<usize> = (0..n_pairs).collect();
    let mut rng = Rng::new(seed).derive(0x5eed);
    rng.shuffle(&mut pairs);
    let n_val_pairs = 2;
    let n_test_pairs = 2;
    let n_train_pairs = n_pairs - n_val_pairs - n_test_pairs;
    let expand = |pairs: &[usize]| -> Vec<usize> {
        pairs
            .iter()
            .flat_map(|&p| (0..DIRECTIONS.len()).map(move |d| p * DIRECTIONS.len() + d))
            .collect()
    };
    let train = expand(&pairs[..n_train_pairs]);
    let val = expand(&pairs[n_train_pairs..n_train_pairs + n_val_pairs]);
    let test = expand(&pairs[n_train_pairs + n_val_pairs..]);
    (train, val, test)
}

fn push_record(buf: &mut Vec<u8>, desc: &SceneDescriptor, spec: &DataSpec, vocab: &Vocab) {
    let l = spec.frame_size;
    let frames = spec.frames_per_video();
    buf.push(desc.shape);
    buf.push(desc.color);
    buf.push(desc.direction);
    buf.push(desc.speed);
    buf.push(desc.background);
    buf.push(desc.start_x);
    buf.push(desc.start_y);
    buf.push(spec.fps);
    buf.extend_from_slice(&(frames as u16).to_le_bytes());
    buf.extend_from_slice(&(l as u16).to_le_bytes());
    for t in 0..frames {
        buf.extend_from_slice(&render_frame(desc, t, l, frames));
    }
    let caption = caption_words(vocab, desc, spec.kind);
    buf.extend_from_slice(&(caption.len() as u16).to_le_bytes());
    for id in &caption {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    let qa = qa_pairs(vocab, desc, spec.kind);
    buf.push(qa.len() as u8);
    for pair in &qa {
        buf.extend_from_slice(&(pair.question.len() as u16).to_le_bytes());
        for id in &pair.question {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        buf.extend_from_slice(&pair.answer.to_le_bytes());
    }
}

/// Writes `manifest.json` and `records.bin` under `dir`.
pub fn generate_corpus(spec: &DataSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let vocab = Vocab::fixed();
    let (train_combos, val_combos, test_combos) = split_combos(seed);
    let root = Rng::new(seed);

    let mut records = Vec::new();
    let mut splits = BTreeMap::new();
    let plan = [
        ("train", spec.train_examples, &train_combos, 1u64),
        ("val", spec.val_examples, &val_combos, 2u64),
        ("test", spec.test_examples, &test_combos, 3u64),
    ];
    for (name, count, pool, tag) in plan {
        let mut offsets = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = root.derive(tag << 32 | i as u64);
            let desc = plan_example(pool, i, spec.frame_size, &mut rng);
            offsets.push(records.len() as u64);
            push_record(&mut records, &desc, spec, &vocab);
        }
        splits.insert(name.to_string(), SplitIndex { count, offsets });
    }

    let manifest = DatasetManifest {
        format_version: 1,
        kind: spec.kind,
        frame_size: spec.frame_size,
        fps: spec.fps,
        duration_seconds: spec.duration_seconds,
        seed,
        vocab,
        answer_names: answer_names(),
        splits,
    };
    std::fs::write(dir.join("records.bin"), &records)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// An opened dataset: manifest plus the raw record bytes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    records: Vec<u8>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let records = std::fs::read(dir.join("records.bin"))?;
        for (name, split) in &manifest.splits {
            if split.offsets.len() != split.count {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("split `{name}` offsets do not match its count"),
                });
            }
            if split.offsets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("split `{name}` offsets are not strictly increasing"),
                });
            }
        }
        Ok(Dataset { manifest, records })
    }

    pub fn split_len(&self, split: &str) -> usize {
        self.manifest.splits.get(split).map_or(0, |s| s.count)
    }

    pub fn record(&self, split: &str, idx: usize) -> Result<Record> {
        let index = self
            .manifest
            .splits
            .get(split)
            .ok_or_else(|| Error::Input(format!("no split named `{split}`")))?;
        let &offset = index
            .offsets
            .get(idx)
            .ok_or_else(|| Error::Input(format!("example {idx} out of {}", index.count)))?;
        parse_record(&self.records, offset)
    }
}

fn parse_record(buf: &[u8], offset: u64) -> Result<Record> {
    let err = |offset: u64, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };
    let mut pos = offset as usize;
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > buf.len() {
            Err(err(pos as u64, "record truncated"))
        } else {
            Ok(())
        }
    };
    need(pos, 12)?;
    let descriptor = SceneDescriptor {
        shape: buf[pos],
        color: buf[pos + 1],
        direction: buf[pos + 2],
        speed: buf[pos + 3],
        background: buf[pos + 4],
        start_x: buf[pos + 5],
        start_y: buf[pos + 6],
    };
    if descriptor.shape as usize >= SHAPES.len()
        || descriptor.color as usize >= COLORS.len()
        || descriptor.direction as usize >= DIRECTIONS.len()
        || descriptor.speed as usize >= SPEEDS.len()
        || descriptor.background as usize >= BACKGROUNDS.len()
    {
        return Err(err(pos as u64, "descriptor field out of range"));
    }
    let fps = buf[pos + 7];
    let frame_count = u16::from_le_bytes([buf[pos + 8], buf[pos + 9]]) as usize;
    let frame_size = u16::from_le_bytes([buf[pos + 10], buf[pos + 11]]) as usize;
    pos += 12;
    if fps == 0 || frame_count == 0 || frame_size == 0 {
        return Err(err(offset, "empty video"));
    }
    let frame_bytes = 3 * frame_size * frame_size;
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        need(pos, frame_bytes)?;
        frames.push(buf[pos..pos + frame_bytes].to_vec());
        pos += frame_bytes;
    }
    need(pos, 2)?;
    let caption_len = u16::from_le_bytes([buf[pos], buf[pos + 1]]) as usize;
    pos += 2;
    need(pos, 2 * caption_len)?;
    let caption: Vec<u16> = (0..caption_len)
        .map(|i| u16::from_le_bytes([buf[pos + 2 * i], buf[pos + 2 * i + 1]]))
        .collect();
    pos += 2 * caption_len;
    need(pos, 1)?;
    let qa_count = buf[pos] as usize;
    pos += 1;
    let mut qa = Vec::with_capacity(qa_count);
    for _ in 0..qa_count {
        need(pos, 2)?;
        let q_len = u16::from_le_bytes([buf[pos], buf[pos + 1]]) as usize;
        pos += 2;
        need(pos, 2 * q_len + 2)?;
        let question: Vec<u16> = (0..q_len)
            .map(|i| u16::from_le_bytes([buf[pos + 2 * i], buf[pos + 2 * i + 1]]))
            .collect();
        pos += 2 * q_len;
        let answer = u16::from_le_bytes([buf[pos], buf[pos + 1]]);
        pos += 2;
        if answer as usize >= NUM_ANSWERS {
            return Err(err(pos as u64, "answer index out of range"));
        }
        qa.push(QaPair { question, answer });
    }
    Ok(Record {
        descriptor,
        fps,
        frame_size,
        frames,
        caption,
        qa,
    })
}

/// One example of a model-ready batch: clips of resized frames plus the raw
/// caption.
#[derive(Debug, Clone)]
pub struct BatchExample {
    /// Index within the split.
    pub index: usize,
    /// `clips[n][t]` is a `[3, L, L]` frame at the model's frame size.
    pub clips: Vec<Vec<Vec<u8>>>,
    pub caption: Vec<u16>,
    pub qa: Vec<QaPair>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<BatchExample>,
    pub frame_size: usize,
    pub frames_per_clip: usize,
}

impl Batch {
    /// `[B, N, T, 3, L, L]`.
    pub fn frame_shape(&self) -> [usize; 6] {
        let b = self.examples.len();
        let n = self.examples.first().map_or(0, |e| e.clips.len());
        [b, n, self.frames_per_clip, 3, self.frame_size, self.frame_size]
    }
}

fn clip_frames(
    record: &Record,
    indices: &[usize],
    model_frame_size: usize,
) -> Result<Vec<Vec<u8>>> {
    indices
        .iter()
        .map(|&i| {
            let frame = record
                .frames
                .get(i)
                .ok_or_else(|| Error::Input(format!("frame {i} out of {}", record.frames.len())))?;
            if record.frame_size == model_frame_size {
                Ok(frame.clone())
            } else {
                resize_zero_pad(frame, record.frame_size, record.frame_size, model_frame_size)
            }
        })
        .collect()
}

/// A single-frame record is its own (only) clip.
fn whole_image_window(record: &Record) -> ClipWindow {
    ClipWindow {
        start_seconds: 0.0,
        duration_seconds: record.video_seconds(),
        frame_indices: vec![0],
    }
}

/// Training batch: clip placement follows the plan's strategy.
pub fn load_batch(
    dataset: &Dataset,
    split: &str,
    ids: &[usize],
    plan: &SamplingPlan,
    model_frame_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let mut examples = Vec::with_capacity(ids.len());
    for &idx in ids {
        let record = dataset.record(split, idx)?;
        let windows = if record.frames.len() == 1 {
            vec![whole_image_window(&record)]
        } else {
            sample_train_clips(record.video_seconds(), record.fps as u32, plan, rng)?
        };
        let clips = windows
            .iter()
            .map(|w| clip_frames(&record, &w.frame_indices, model_frame_size))
            .collect::<Result<Vec<_>>>()?;
        examples.push(BatchExample {
            index: idx,
            clips,
            caption: record.caption.clone(),
            qa: record.qa.clone(),
        });
    }
    Ok(Batch {
        examples,
        frame_size: model_frame_size,
        frames_per_clip: plan.frames_per_clip,
    })
}

/// Inference clips: dense uniform placement, no randomness.
pub fn load_eval_clips(
    dataset: &Dataset,
    split: &str,
    idx: usize,
    plan: &SamplingPlan,
    model_frame_size: usize,
) -> Result<BatchExample> {
    let record = dataset.record(split, idx)?;
    let windows = if record.frames.len() == 1 {
        vec![whole_image_window(&record)]
    } else {
        sample_eval_clips(record.video_seconds(), record.fps as u32, plan)?
    };
    let clips = windows
        .iter()
        .map(|w| clip_frames(&record, &w.frame_indices, model_frame_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchExample {
        index: idx,
        clips,
        caption: record.caption.clone(),
        qa: record.qa.clone(),
    })
}
