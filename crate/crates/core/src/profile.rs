//! Step-cost profiling: wall time per forward+backward pass and accounted
//! peak memory, as functions of the clip count or the frames per clip.
//!
//! Memory is the byte count of tensor buffers (values, gradients, parameter
//! copies) accounted on the graph, not OS RSS, so the numbers are
//! deterministic and portable. Timings are the median of five repetitions
//! after two warmups, single-threaded.

use crate::aggregation::{aggregate_var, mil_loss_var};
use crate::data::render_frame;
use crate::data::SceneDescriptor;
use crate::graph::Graph;
use crate::model::{assemble_text, tokens, BoundModel, FreezeFlags, HeadKind, Params};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::train::RunConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchAxis {
    /// Sweep the number of clips per video (frames per clip fixed).
    Clips,
    /// Sweep the frames per clip (single clip).
    Frames,
}

impl BenchAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clips" => Ok(BenchAxis::Clips),
            "frames" => Ok(BenchAxis::Frames),
            other => Err(Error::Input(format!(
                "unknown bench axis `{other}` (expected clips|frames)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRecord {
    pub axis_value: usize,
    pub batch: usize,
    pub wall_ms_median: f64,
    pub peak_bytes: u64,
    /// False when an imposed memory budget was exceeded.
    pub feasible: bool,
}

/// CSV layout: one row per record, status column marks budget violations.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("axis_value,batch,wall_ms_median,peak_bytes,status\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.3},{},{}\n",
            r.axis_value,
            r.batch,
            r.wall_ms_median,
            r.peak_bytes,
            if r.feasible { "ok" } else { "infeasible" }
        ));
    }
    out
}

/// Synthetic frames for benchmarking: rendered scenes, one per (clip, frame)
/// slot, so the work matches real training inputs.
fn synthetic_clips(
    l: usize,
    clips: usize,
    frames_per_clip: usize,
    rng: &mut Rng,
) -> Vec<Vec<Vec<u8>>> {
    (0..clips)
        .map(|_| {
            let desc = SceneDescriptor {
                shape: rng.below(4) as u8,
                color: rng.below(4) as u8,
                direction: rng.below(4) as u8,
                speed: rng.below(2) as u8,
                background: rng.below(4) as u8,
                start_x: rng.below(l) as u8,
                start_y: rng.below(l) as u8,
            };
            (0..frames_per_clip)
                .map(|t| render_frame(&desc, t, l, frames_per_clip.max(2)))
                .collect()
        })
        .collect()
}

/// One full training-style pass (forward through all clips of a batch,
/// aggregation, loss, backward; no optimizer). Returns (wall ms, peak bytes
/// including the bound parameter copies).
fn timed_pass<S: Scalar>(
    config: &RunConfig,
    params: &Params<S>,
    clips_per_example: usize,
    frames_per_clip: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<(f64, u64)> {
    let l = config.model.frame_size;
    let words = vec![tokens::FIRST_WORD, tokens::FIRST_WORD + 1, tokens::FIRST_WORD + 2];
    let (ids, real) = assemble_text(&words, config.model.max_text_len)?;
    let examples: Vec<Vec<Vec<Vec<u8>>>> = (0..batch)
        .map(|_| synthetic_clips(l, clips_per_example, frames_per_clip, rng))
        .collect();

    let started = std::time::Instant::now();
    let mut g: Graph<S> = Graph::new();
    let bound = BoundModel::bind(
        &mut g,
        params,
        &config.model,
        config.fusion,
        FreezeFlags::none(),
        true,
    );
    let mut losses = Vec::with_capacity(batch);
    for clips in &examples {
        let mut clip_logits = Vec::with_capacity(clips.len());
        for clip in clips {
            let (logits, _) =
                bound.clip_forward(&mut g, clip, &ids, &real, HeadKind::Retrieval, None)?;
            clip_logits.push(logits);
        }
        let pred = aggregate_var(&mut g, config.aggregation, &clip_logits)?;
        losses.push(mil_loss_var(&mut g, pred, 1)?);
    }
    let rows: Vec<_> = losses
        .iter()
        .map(|&v| g.reshape(v, vec![1]))
        .collect::<Result<_>>()?;
    let stacked = g.concat(&rows, 0)?;
    let loss = g.mean_all(stacked)?;
    g.backward(loss)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok((wall_ms, g.peak_bytes() as u64))
}

/// Runs 2 warmup + 5 timed passes per axis value and reports median wall
/// time and accounted peak bytes. Values must be ascending. Records whose
/// peak exceeds `memory_budget` are marked infeasible.
pub fn bench_step<S: Scalar>(
    config: &RunConfig,
    axis: BenchAxis,
    values: &[usize],
    memory_budget: Option<u64>,
) -> Result<Vec<BenchRecord>> {
    if values.is_empty() {
        return Err(Error::Input("no axis values to benchmark".into()));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("axis values must be strictly ascending".into()));
    }
    config.model.validate()?;
    let mut rng = Rng::new(config.seed);
    let params: Params<S> = Params::init(&config.model, config.fusion, &mut rng)?;
    let param_bytes = params.byte_size() as u64;
    let mut records = Vec::with_capacity(values.len());
    for &value in values {
        let (clips, frames) = match axis {
            BenchAxis::Clips => (value, config.sampling.frames_per_clip),
            BenchAxis::Frames => (1, value),
        };
        let mut walls = Vec::with_capacity(5);
        let mut peak = 0u64;
        for rep in 0..7 {
            let (wall, graph_peak) =
                timed_pass(config, &params, clips, frames, config.batch_size, &mut rng)?;
            peak = peak.max(param_bytes + graph_peak);
            if rep >= 2 {
                walls.push(wall);
            }
        }
        walls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let record = BenchRecord {
            axis_value: value,
            batch: config.batch_size,
            wall_ms_median: walls[walls.len() / 2],
            peak_bytes: peak,
            feasible: memory_budget.map_or(true, |b| peak <= b),
        };
        records.push(record);
    }
    Ok(records)
}

/// Largest batch size whose accounted peak stays within the budget.
/// Returns 0 when even the parameters alone do not fit.
pub fn max_batch_search<S: Scalar>(config: &RunConfig, memory_budget: u64) -> Result<usize> {
    config.model.validate()?;
    let mut rng = Rng::new(config.seed);
    let params: Params<S> = Params::init(&config.model, config.fusion, &mut rng)?;
    let param_bytes = params.byte_size() as u64;
    if memory_budget <= param_bytes {
        return Ok(0);
    }
    let clips = config.sampling.train_clips;
    let frames = config.sampling.frames_per_clip;
    let fits = |b: usize| -> Result<bool> {
        let mut probe_rng = Rng::new(config.seed ^ 0xb17c);
        let (_, graph_peak) = timed_pass(config, &params, clips, frames, b, &mut probe_rng)?;
        Ok(param_bytes + graph_peak <= memory_budget)
    };
    if !fits(1)? {
        return Ok(0);
    }
    // grow until infeasible, then bisect
    let mut lo = 1usize;
    let mut hi = 2usize;
    const CAP: usize = 4096;
    while hi <= CAP && fits(hi)? {
        lo = hi;
        hi *= 2;
    }
    if hi > CAP {
        return Ok(lo);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
