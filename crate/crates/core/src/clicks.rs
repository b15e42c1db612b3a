//! Synthetic click generation.
//!
//! Positive clicks keep a minimum distance from the mask border and from
//! each other. When a mask is too small or thin for the requested
//! constraints, a fixed relaxation ladder applies:
//!
//! 1. halve `d_between` until the clicks fit or it drops below 2 px;
//! 2. drop the pairwise constraint and halve `d_border` the same way;
//! 3. fall back to the mask's pole, the pixel(s) farthest from the border.
//!
//! Negative clicks come from an ordered list of strategies, falling through
//! to the next strategy when one has no candidates.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_class_name, ClassSplit, Click, DataError, InstanceMask, InteractionSet};
use crate::geometry::{mask_boundary, squared_edt, GeometryError, Pixel};

#[derive(Debug, Error)]
pub enum ClickError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("target covers the whole image; no negative click is possible")]
    NoNegativeCandidates,
    #[error("invalid click config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Pixels of other instances of the target's class in the same image.
    OtherInstance,
    /// Background pixels in a thin ring just outside the target.
    OuterBoundary,
}

/// Which inputs an interaction carries: text on/off plus click counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionSpec {
    pub text: bool,
    pub pclicks: usize,
    pub nclicks: usize,
}

impl InteractionSpec {
    pub fn new(text: bool, pclicks: usize, nclicks: usize) -> Self {
        InteractionSpec { text, pclicks, nclicks }
    }

    pub fn label(&self) -> String {
        format!("{},{},{}", if self.text { "text" } else { "notext" }, self.pclicks, self.nclicks)
    }
}

impl std::fmt::Display for InteractionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for InteractionSpec {
    type Err = ClickError;

    /// `text,2,1` or `notext,1,0`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClickError::InvalidConfig(format!("bad interaction spec {s:?}, expected e.g. text,1,0"));
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [t, p, n] = parts.as_slice() else { return Err(bad()) };
        let text = match *t {
            "text" | "t" | "1" | "true" => true,
            "notext" | "no-text" | "-" | "0" | "false" => false,
            _ => return Err(bad()),
        };
        let pclicks = p.parse().map_err(|_| bad())?;
        let nclicks = n.parse().map_err(|_| bad())?;
        let spec = InteractionSpec { text, pclicks, nclicks };
        if !text && pclicks + nclicks == 0 {
            return Err(ClickError::InvalidConfig(format!("{s:?} has no inputs")));
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClickConfig {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Minimum distance of positive clicks from the mask boundary, pixels.
    pub d_border: f64,
    /// Minimum pairwise distance between positive clicks, pixels.
    pub d_between: f64,
    pub samples_per_instance: usize,
    pub neg_strategies: Vec<NegativeStrategy>,
    /// Outer radius of the `outer_boundary` ring, pixels.
    pub ring_radius: f64,
    pub rng_seed: u64,
    /// When non-empty, sample `s` of every instance uses `mix[s % mix.len()]`
    /// instead of `n_pos`/`n_neg`, and drops the text when that entry says so.
    pub mix: Vec<InteractionSpec>,
}

impl Default for ClickConfig {
    fn default() -> Self {
        ClickConfig {
            n_pos: 1,
            n_neg: 0,
            d_border: 15.0,
            d_between: 150.0,
            samples_per_instance: 1,
            neg_strategies: vec![NegativeStrategy::OtherInstance, NegativeStrategy::OuterBoundary],
            ring_radius: 20.0,
            rng_seed: 0,
            mix: Vec::new(),
        }
    }
}

impl ClickConfig {
    /// Five samples per instance, used for the small fully supervised refCOCO runs.
    pub fn refcoco_fully_supervised() -> Self {
        ClickConfig { samples_per_instance: 5, ..Default::default() }
    }

    pub fn with_spec(&self, spec: InteractionSpec) -> Self {
        ClickConfig { n_pos: spec.pclicks, n_neg: spec.nclicks, mix: Vec::new(), ..self.clone() }
    }

    /// `text_only` allows zero clicks.
    pub fn validate(&self, text_only: bool) -> Result<(), ClickError> {
        if self.samples_per_instance == 0 {
            return Err(ClickError::InvalidConfig("samples_per_instance must be at least 1".into()));
        }
        if self.mix.is_empty() && !text_only && self.n_pos + self.n_neg == 0 {
            return Err(ClickError::InvalidConfig("at least one click is required".into()));
        }
        let needs_neg = self.n_neg > 0 || self.mix.iter().any(|m| m.nclicks > 0);
        if needs_neg && self.neg_strategies.is_empty() {
            return Err(ClickError::InvalidConfig("negative clicks need at least one strategy".into()));
        }
        for (name, v) in [("d_border", self.d_border), ("d_between", self.d_between), ("ring_radius", self.ring_radius)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ClickError::InvalidConfig(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }

    fn spec_for_sample(&self, sample: usize) -> InteractionSpec {
        if self.mix.is_empty() {
            InteractionSpec::new(true, self.n_pos, self.n_neg)
        } else {
            self.mix[sample % self.mix.len()]
        }
    }
}

/// How far the ladder had to go for one positive-click sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum Relaxation {
    None,
    Between { d_between: f64 },
    Border { d_border: f64 },
    Pole,
}

impl Relaxation {
    pub fn is_relaxed(&self) -> bool {
        !matches!(self, Relaxation::None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositiveSample {
    pub clicks: Vec<Click>,
    pub relaxation: Relaxation,
}

/// Distance from each foreground pixel to the nearest boundary pixel
/// (zero on the boundary, infinite outside the mask).
pub fn interior_distance(mask: &Array2<bool>) -> Result<Array2<f64>, ClickError> {
    let boundary = mask_boundary(mask.view()).map_err(|_| ClickError::EmptyMask)?;
    let mut seeds = Array2::from_elem(mask.dim(), false);
    for p in &boundary {
        seeds[[p.y, p.x]] = true;
    }
    let mut d = squared_edt(seeds.view()).mapv(f64::sqrt);
    ndarray::Zip::from(&mut d).and(mask).for_each(|d, &m| {
        if !m {
            *d = f64::INFINITY;
        }
    });
    Ok(d)
}

fn to_click(p: Pixel) -> Click {
    Click::positive(p.x as u32, p.y as u32)
}

/// Convex hull vertices of a pixel set (monotone chain over row extremes).
fn hull(points: &[Pixel]) -> Vec<Pixel> {
    let mut extremes: HashMap<usize, (usize, usize)> = HashMap::new();
    for p in points {
        let e = extremes.entry(p.y).or_insert((p.x, p.x));
        e.0 = e.0.min(p.x);
        e.1 = e.1.max(p.x);
    }
    let mut pts: Vec<(i64, i64)> = extremes
        .iter()
        .flat_map(|(&y, &(a, b))| [(a as i64, y as i64), (b as i64, y as i64)])
        .collect();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts.into_iter().map(|(x, y)| Pixel::new(y as usize, x as usize)).collect();
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower.into_iter().map(|(x, y)| Pixel::new(y as usize, x as usize)).collect()
}

const GREEDY_RESTARTS: usize = 16;

/// Try to place `n` clicks from `candidates` with pairwise distance at
/// least `min_sep` (distinct pixels when `min_sep < 1`).
fn place<R: Rng>(candidates: &[Pixel], n: usize, min_sep: f64, rng: &mut R) -> Option<Vec<Pixel>> {
    if candidates.len() < n || n == 0 {
        return if n == 0 { Some(Vec::new()) } else { None };
    }
    if n == 1 {
        return candidates.choose(rng).map(|&p| vec![p]);
    }
    let sep = min_sep.max(1.0);
    let vertices = hull(candidates);
    let starts: Vec<Pixel> = candidates
        .iter()
        .copied()
        .filter(|p| vertices.iter().any(|v| v.distance(p) >= sep))
        .collect();
    if starts.is_empty() {
        return None;
    }
    for _ in 0..GREEDY_RESTARTS {
        let mut chosen = vec![*starts.choose(rng)?];
        while chosen.len() < n {
            let pool: Vec<Pixel> = candidates
                .iter()
                .copied()
                .filter(|q| chosen.iter().all(|c| c.distance(q) >= sep))
                .collect();
            match pool.choose(rng) {
                Some(&q) => chosen.push(q),
                None => break,
            }
        }
        if chosen.len() == n {
            return Some(chosen);
        }
    }
    None
}

fn halvings(start: f64) -> Vec<f64> {
    let mut out = vec![start];
    let mut v = start / 2.0;
    while v >= 2.0 {
        out.push(v);
        v /= 2.0;
    }
    out
}

pub fn sample_positive_clicks<R: Rng>(
    mask: &Array2<bool>,
    n_pos: usize,
    cfg: &ClickConfig,
    rng: &mut R,
) -> Result<PositiveSample, ClickError> {
    let interior = interior_distance(mask)?;
    if n_pos == 0 {
        return Ok(PositiveSample { clicks: Vec::new(), relaxation: Relaxation::None });
    }
    let pixels: Vec<(Pixel, f64)> = interior
        .indexed_iter()
        .filter(|(_, d)| d.is_finite())
        .map(|((y, x), &d)| (Pixel::new(y, x), d))
        .collect();
    let candidates_at = |r: f64| -> Vec<Pixel> { pixels.iter().filter(|(_, d)| *d >= r).map(|(p, _)| *p).collect() };

    let mut ladder: Vec<(f64, f64, Relaxation)> = Vec::new();
    if n_pos >= 2 {
        for (k, b) in halvings(cfg.d_between).into_iter().enumerate() {
            let label = if k == 0 { Relaxation::None } else { Relaxation::Between { d_between: b } };
            ladder.push((b, cfg.d_border, label));
        }
    }
    for (k, r) in halvings(cfg.d_border).into_iter().enumerate() {
        let label = if k == 0 && n_pos < 2 { Relaxation::None } else { Relaxation::Border { d_border: r } };
        ladder.push((0.0, r, label));
    }

    for (sep, border, relaxation) in ladder {
        let candidates = candidates_at(border);
        if let Some(found) = place(&candidates, n_pos, sep, rng) {
            return Ok(PositiveSample { clicks: found.into_iter().map(to_click).collect(), relaxation });
        }
    }

    let mut by_depth = pixels;
    by_depth.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let clicks = by_depth.iter().cycle().take(n_pos).map(|(p, _)| to_click(*p)).collect();
    Ok(PositiveSample { clicks, relaxation: Relaxation::Pole })
}

pub fn sample_negative_clicks<R: Rng>(
    target: &Array2<bool>,
    same_class_instances: &[Array2<bool>],
    n_neg: usize,
    cfg: &ClickConfig,
    rng: &mut R,
) -> Result<Vec<Click>, ClickError> {
    if !target.iter().any(|&v| v) {
        return Err(ClickError::EmptyMask);
    }
    let background: Vec<Pixel> = target
        .indexed_iter()
        .filter(|(_, &t)| !t)
        .map(|((y, x), _)| Pixel::new(y, x))
        .collect();
    if background.is_empty() {
        return Err(ClickError::NoNegativeCandidates);
    }
    if n_neg == 0 {
        return Ok(Vec::new());
    }
    let mut pools: Vec<Vec<Pixel>> = Vec::with_capacity(cfg.neg_strategies.len());
    for strategy in &cfg.neg_strategies {
        let pool = match strategy {
            NegativeStrategy::OtherInstance => background
                .iter()
                .copied()
                .filter(|p| same_class_instances.iter().any(|m| m.get((p.y, p.x)).copied().unwrap_or(false)))
                .collect(),
            NegativeStrategy::OuterBoundary => {
                let dist2 = squared_edt(target.view());
                let r2 = cfg.ring_radius * cfg.ring_radius;
                background.iter().copied().filter(|p| dist2[[p.y, p.x]] <= r2).collect()
            }
        };
        pools.push(pool);
    }

    let mut chosen: Vec<Pixel> = Vec::with_capacity(n_neg);
    for _ in 0..n_neg {
        let mut picked = None;
        for pool in &mut pools {
            pool.retain(|p| !chosen.contains(p));
            if let Some(&p) = pool.choose(rng) {
                picked = Some(p);
                break;
            }
        }
        let p = match picked {
            Some(p) => p,
            None => {
                let fresh: Vec<Pixel> = background.iter().copied().filter(|p| !chosen.contains(p)).collect();
                *fresh.choose(rng).unwrap_or_else(|| background.choose(rng).expect("non-empty"))
            }
        };
        chosen.push(p);
    }
    Ok(chosen.into_iter().map(|p| Click::negative(p.x as u32, p.y as u32)).collect())
}

/// Seeded generator for sample `sample` of the instance at `instance_index`.
pub fn instance_rng(seed: u64, instance_index: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ instance_index as u64);
    rng.set_stream(sample as u64);
    rng
}

/// Clicks for sample `sample` of one instance. `others` are the other
/// instances of the same class in the image.
pub fn sample_interaction(
    instance: &InstanceMask,
    instance_index: usize,
    sample: usize,
    others: &[Array2<bool>],
    cfg: &ClickConfig,
) -> Result<(InteractionSet, Relaxation), ClickError> {
    let spec = cfg.spec_for_sample(sample);
    let mask = instance.decode()?;
    let mut rng = instance_rng(cfg.rng_seed, instance_index, sample);
    let pos = sample_positive_clicks(&mask, spec.pclicks, cfg, &mut rng)?;
    let neg = sample_negative_clicks(&mask, others, spec.nclicks, cfg, &mut rng)?;
    let mut clicks = pos.clicks;
    clicks.extend(neg);
    let text = spec.text.then(|| instance.class_name.clone());
    let set = InteractionSet::new(instance.instance_id.clone(), clicks, text)?;
    Ok((set, pos.relaxation))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthesisMode {
    /// Seen-class instances only.
    Train,
    /// Every instance.
    Eval,
}

/// One line of the interactions JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub image_id: String,
    pub sample: usize,
    #[serde(flatten)]
    pub interaction: InteractionSet,
    pub relaxation: Relaxation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SynthesisStats {
    pub instances: usize,
    pub samples: usize,
    pub relaxed: usize,
    pub skipped: usize,
}

impl SynthesisStats {
    /// Fraction of emitted samples that needed the relaxation ladder.
    pub fn relaxation_rate(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.relaxed as f64 / self.samples as f64
        }
    }
}

/// `samples_per_instance` interaction sets per instance, in instance order.
/// In train mode only seen-class instances are used. Failing instances are
/// logged and skipped.
pub fn synthesize_interactions(
    instances: &[InstanceMask],
    split: Option<&ClassSplit>,
    cfg: &ClickConfig,
    mode: SynthesisMode,
) -> Result<(Vec<InteractionRecord>, SynthesisStats), ClickError> {
    cfg.validate(false)?;
    let mut by_image: HashMap<(&str, String), Vec<usize>> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        by_image
            .entry((inst.image_id.as_str(), normalize_class_name(&inst.class_name)))
            .or_default()
            .push(i);
    }
    let selected: Vec<usize> = (0..instances.len())
        .filter(|&i| match (mode, split) {
            (SynthesisMode::Train, Some(split)) => split.is_seen(&instances[i].class_name),
            _ => true,
        })
        .collect();

    let per_instance: Vec<Result<Vec<InteractionRecord>, (usize, ClickError)>> = selected
        .par_iter()
        .map(|&i| {
            let inst = &instances[i];
            let key = (inst.image_id.as_str(), normalize_class_name(&inst.class_name));
            let others: Vec<Array2<bool>> = by_image[&key]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| instances[j].decode())
                .collect::<Result<_, _>>()
                .map_err(|e| (i, e.into()))?;
            (0..cfg.samples_per_instance)
                .map(|s| {
                    let (interaction, relaxation) = sample_interaction(inst, i, s, &others, cfg).map_err(|e| (i, e))?;
                    Ok(InteractionRecord { image_id: inst.image_id.clone(), sample: s, interaction, relaxation })
                })
                .collect()
        })
        .collect();

    let mut stats = SynthesisStats::default();
    let mut records = Vec::new();
    for result in per_instance {
        match result {
            Ok(recs) => {
                stats.instances += 1;
                stats.samples += recs.len();
                stats.relaxed += recs.iter().filter(|r| r.relaxation.is_relaxed()).count();
                records.extend(recs);
            }
            Err((i, err)) => {
                tracing::warn!(instance = %instances[i].instance_id, error = %err, "skipping instance");
                stats.skipped += 1;
            }
        }
    }
    Ok((records, stats))
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[InteractionRecord]) -> Result<(), ClickError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|source| ClickError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<InteractionRecord>, ClickError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ClickError::Json { line: i + 1, source })?);
    }
    Ok(out)
}
