//! Evaluation under seen/unseen splits: per-instance IoU and boundary IoU,
//! aggregates, distractor buckets and interaction sweeps.

mod plot;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clicks::{sample_interaction, ClickConfig, ClickError, InteractionSpec};
use crate::data::{normalize_class_name, ClassSplit, InteractionSet};
use crate::dataset::{DatasetError, DatasetManifest, SaliencySource};
use crate::geometry::{default_boundary_width, mask_boundary_iou, mask_iou};
use crate::model::{finish, Checkpoint, PredictError};

pub use plot::plot_distractor_buckets;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("aggregates do not match per-instance rows: {0}")]
    Inconsistent(String),
    #[error("rows of the sweep are not paired: {0}")]
    Unpaired(String),
    #[error(transparent)]
    Clicks(#[from] ClickError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

/// How per-instance IoUs are averaged into mIoU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Mean over instances.
    #[default]
    Instance,
    /// Mean over classes of each class's instance mean.
    Class,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance_id: String,
    pub image_id: String,
    pub class_name: String,
    pub seen: bool,
    pub iou: f64,
    pub boundary_iou: f64,
    pub n_same_class_in_image: usize,
    pub confidence: f64,
    /// Set when the instance could not be evaluated; its IoUs are then 0.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub averaging: Averaging,
    pub overall_miou: Option<f64>,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub overall_boundary_iou: Option<f64>,
    pub seen_boundary_iou: Option<f64>,
    pub unseen_boundary_iou: Option<f64>,
    pub n_overall: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub instances: usize,
    pub mean_iou: f64,
}

/// Echo of what was evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub interactions: String,
    pub click_seed: u64,
    pub backend_id: Option<String>,
    pub checkpoint_revision: String,
    pub checkpoint_iteration: usize,
    /// Boundary band width in pixels; `None` means 2% of each image diagonal.
    pub boundary_width: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setup: EvalSetup,
    pub aggregates: Aggregates,
    pub distractor_buckets: BTreeMap<usize, Bucket>,
    pub per_instance: Vec<InstanceRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn average<'a>(rows: impl Iterator<Item = &'a InstanceRow> + Clone, field: fn(&InstanceRow) -> f64, how: Averaging) -> Option<f64> {
    match how {
        Averaging::Instance => mean(rows.map(field)),
        Averaging::Class => {
            let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in rows {
                by_class.entry(normalize_class_name(&r.class_name)).or_default().push(field(r));
            }
            mean(by_class.values().map(|v| v.iter().sum::<f64>() / v.len() as f64))
        }
    }
}

/// Aggregate rows into overall/seen/unseen means.
pub fn aggregate(rows: &[InstanceRow], how: Averaging) -> Aggregates {
    let seen = || rows.iter().filter(|r| r.seen);
    let unseen = || rows.iter().filter(|r| !r.seen);
    Aggregates {
        averaging: how,
        overall_miou: average(rows.iter(), |r| r.iou, how),
        seen_miou: average(seen(), |r| r.iou, how),
        unseen_miou: average(unseen(), |r| r.iou, how),
        overall_boundary_iou: average(rows.iter(), |r| r.boundary_iou, how),
        seen_boundary_iou: average(seen(), |r| r.boundary_iou, how),
        unseen_boundary_iou: average(unseen(), |r| r.boundary_iou, how),
        n_overall: rows.len(),
        n_seen: seen().count(),
        n_unseen: unseen().count(),
    }
}

/// Mean IoU of unseen-class instances, grouped by how many instances of the
/// same class share their image.
pub fn distractor_analysis(rows: &[InstanceRow]) -> BTreeMap<usize, Bucket> {
    let mut acc: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.seen) {
        let e = acc.entry(r.n_same_class_in_image).or_default();
        e.0 += 1;
        e.1 += r.iou;
    }
    acc.into_iter().map(|(k, (n, s))| (k, Bucket { instances: n, mean_iou: s / n as f64 })).collect()
}

impl EvalReport {
    pub fn from_rows(setup: EvalSetup, rows: Vec<InstanceRow>, how: Averaging) -> Self {
        EvalReport {
            setup,
            aggregates: aggregate(&rows, how),
            distractor_buckets: distractor_analysis(&rows),
            per_instance: rows,
        }
    }

    /// Aggregates and buckets recomputed from the rows equal the stored ones.
    pub fn check(&self) -> Result<(), EvalError> {
        let again = aggregate(&self.per_instance, self.aggregates.averaging);
        if again != self.aggregates {
            return Err(EvalError::Inconsistent(format!("stored {:?}, recomputed {again:?}", self.aggregates)));
        }
        if distractor_analysis(&self.per_instance) != self.distractor_buckets {
            return Err(EvalError::Inconsistent("distractor buckets".into()));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        self.check()?;
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        self.check()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# averaging={:?} interactions={}", self.aggregates.averaging, self.setup.interactions)?;
        writeln!(f, "instance_id,image_id,class_name,seen,iou,boundary_iou,n_same_class_in_image,confidence,error")?;
        for r in &self.per_instance {
            let quote = |s: &str| if s.contains([',', '"', '\n']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
            writeln!(
                f,
                "{},{},{},{},{:.6},{:.6},{},{:.6},{}",
                quote(&r.instance_id),
                quote(&r.image_id),
                quote(&r.class_name),
                r.seen,
                r.iou,
                r.boundary_iou,
                r.n_same_class_in_image,
                r.confidence,
                r.error.as_deref().map(quote).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub averaging: Averaging,
    /// Fixed boundary band width; `None` uses 2% of the image diagonal.
    pub boundary_width: Option<usize>,
    /// Instances per forward pass.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { averaging: Averaging::Instance, boundary_width: None, batch_size: 16 }
    }
}

/// Synthesize the interaction for every instance under `spec`. Failures are
/// kept as errors so they can be scored instead of dropped.
pub fn eval_interactions(
    dataset: &DatasetManifest,
    spec: InteractionSpec,
    clicks: &ClickConfig,
) -> Vec<Result<InteractionSet, String>> {
    let cfg = clicks.with_spec(spec);
    let mut groups: HashMap<(&str, String), Vec<usize>> = HashMap::new();
    for (i, inst) in dataset.instances.iter().enumerate() {
        groups.entry((inst.image_id.as_str(), normalize_class_name(&inst.class_name))).or_default().push(i);
    }
    dataset
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let key = (inst.image_id.as_str(), normalize_class_name(&inst.class_name));
            let others: Vec<Array2<bool>> = groups[&key]
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dataset.instances[j].decode())
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let (set, _) = sample_interaction(inst, i, 0, &others, &cfg).map_err(|e| e.to_string())?;
            if spec.text {
                Ok(set)
            } else {
                set.without_text().map_err(|e| e.to_string())
            }
        })
        .collect()
}

/// One prediction per instance of `dataset` under interaction `spec`.
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &DatasetManifest,
    split: &ClassSplit,
    spec: InteractionSpec,
    clicks: &ClickConfig,
    saliency: Option<&SaliencySource>,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let interactions = eval_interactions(dataset, spec, clicks);
    let mut rows: Vec<Option<InstanceRow>> = vec![None; dataset.instances.len()];
    let mut pending = Vec::new();

    let flush = |pending: &mut Vec<(usize, crate::data::LoadedImage, InteractionSet, ndarray::Array3<f32>, crate::geometry::Letterbox)>,
                 rows: &mut Vec<Option<InstanceRow>>|
     -> Result<(), EvalError> {
        if pending.is_empty() {
            return Ok(());
        }
        let inputs: Vec<_> = pending.iter().map(|p| p.3.clone()).collect();
        let probs = checkpoint.probabilities(&inputs)?;
        for ((i, image, set, _, lb), prob) in pending.drain(..).zip(probs) {
            let pred = finish(&prob, &lb, &image, &set, None);
            rows[i] = Some(score(dataset, split, i, Ok((pred.mask.decode().map_err(DatasetError::from)?, pred.confidence)), opts));
        }
        Ok(())
    };

    for (i, inter) in interactions.into_iter().enumerate() {
        let inst = &dataset.instances[i];
        let prepared = inter.and_then(|set| {
            let image = dataset.load_image(&inst.image_id).map_err(|e| e.to_string())?;
            let (channels, lb, _) = checkpoint.prepare(&image, &set, saliency).map_err(|e| e.to_string())?;
            Ok((image, set, channels, lb))
        });
        match prepared {
            Ok((image, set, channels, lb)) => {
                pending.push((i, image, set, channels, lb));
                if pending.len() >= opts.batch_size.max(1) {
                    flush(&mut pending, &mut rows)?;
                }
            }
            Err(msg) => {
                tracing::warn!(instance = %inst.instance_id, error = %msg, "instance scored as 0");
                rows[i] = Some(score(dataset, split, i, Err(msg), opts));
            }
        }
    }
    flush(&mut pending, &mut rows)?;

    let setup = EvalSetup {
        interactions: spec.label(),
        click_seed: clicks.rng_seed,
        backend_id: saliency.filter(|_| spec.text && checkpoint.manifest.assembly.use_text).map(|s| s.backend.id().to_string()),
        checkpoint_revision: checkpoint.manifest.git_revision.clone(),
        checkpoint_iteration: checkpoint.manifest.iteration,
        boundary_width: opts.boundary_width,
    };
    let report = EvalReport::from_rows(setup, rows.into_iter().map(|r| r.expect("every instance scored")).collect(), opts.averaging);
    report.check()?;
    Ok(report)
}

fn score(
    dataset: &DatasetManifest,
    split: &ClassSplit,
    i: usize,
    pred: Result<(Array2<bool>, f64), String>,
    opts: &EvalOptions,
) -> InstanceRow {
    let inst = &dataset.instances[i];
    let mut row = InstanceRow {
        instance_id: inst.instance_id.clone(),
        image_id: inst.image_id.clone(),
        class_name: inst.class_name.clone(),
        seen: split.is_seen(&inst.class_name),
        iou: 0.0,
        boundary_iou: 0.0,
        n_same_class_in_image: dataset.same_class_count(&inst.image_id, &inst.class_name),
        confidence: 0.0,
        error: None,
    };
    let result = pred.and_then(|(mask, conf)| {
        let gt = inst.decode().map_err(|e| e.to_string())?;
        let (h, w) = gt.dim();
        let d = opts.boundary_width.unwrap_or_else(|| default_boundary_width(h, w));
        let iou = mask_iou(mask.view(), gt.view()).map_err(|e| e.to_string())?;
        let biou = mask_boundary_iou(mask.view(), gt.view(), d).map_err(|e| e.to_string())?;
        Ok((iou, biou, conf))
    });
    match result {
        Ok((iou, biou, conf)) => {
            row.iou = iou;
            row.boundary_iou = biou;
            row.confidence = conf;
        }
        Err(e) => row.error = Some(e),
    }
    row
}

/// Reports for several interaction specs over the same instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<(InteractionSpec, EvalReport)>,
}

impl SweepTable {
    /// Per-instance IoU differences `b - a` between two entries.
    pub fn paired_delta(&self, a: usize, b: usize) -> Result<Vec<f64>, EvalError> {
        let (ra, rb) = (&self.rows[a].1, &self.rows[b].1);
        if ra.per_instance.len() != rb.per_instance.len() {
            return Err(EvalError::Unpaired("different instance counts".into()));
        }
        ra.per_instance
            .iter()
            .zip(&rb.per_instance)
            .map(|(x, y)| {
                if x.instance_id != y.instance_id {
                    Err(EvalError::Unpaired(format!("{} vs {}", x.instance_id, y.instance_id)))
                } else {
                    Ok(y.iou - x.iou)
                }
            })
            .collect()
    }

    pub fn overall(&self) -> Vec<(String, Option<f64>)> {
        self.rows.iter().map(|(s, r)| (s.label(), r.aggregates.overall_miou)).collect()
    }
}

/// Evaluate every spec with the same click seed and instance order.
pub fn interaction_sweep(
    checkpoint: &Checkpoint,
    dataset: &DatasetManifest,
    split: &ClassSplit,
    specs: &[InteractionSpec],
    clicks: &ClickConfig,
    saliency: Option<&SaliencySource>,
    opts: &EvalOptions,
) -> Result<SweepTable, EvalError> {
    let rows = specs
        .iter()
        .map(|&spec| Ok((spec, evaluate(checkpoint, dataset, split, spec, clicks, saliency, opts)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, class: &str, seen: bool, iou: f64, n: usize) -> InstanceRow {
        InstanceRow {
            instance_id: id.into(),
            image_id: "img".into(),
            class_name: class.into(),
            seen,
            iou,
            boundary_iou: iou / 2.0,
            n_same_class_in_image: n,
            confidence: 0.5,
            error: None,
        }
    }

    fn setup() -> EvalSetup {
        EvalSetup {
            interactions: "text,1,0".into(),
            click_seed: 1,
            backend_id: None,
            checkpoint_revision: "r".into(),
            checkpoint_iteration: 0,
            boundary_width: None,
        }
    }

    #[test]
    fn aggregate_arithmetic() {
        let rows = vec![row("a", "cat", true, 1.0, 1), row("b", "cat", true, 0.0, 1), row("c", "tie", false, 0.5, 1)];
        let a = aggregate(&rows, Averaging::Instance);
        assert_eq!((a.overall_miou, a.seen_miou, a.unseen_miou), (Some(0.5), Some(0.5), Some(0.5)));
        assert_eq!((a.n_seen, a.n_unseen), (2, 1));
        let rows = vec![row("a", "cat", true, 1.0, 1), row("b", "cat", true, 1.0, 1), row("c", "dog", true, 0.0, 1)];
        assert_eq!(aggregate(&rows, Averaging::Instance).overall_miou, Some(2.0 / 3.0));
        assert_eq!(aggregate(&rows, Averaging::Class).overall_miou, Some(0.5));
        assert_eq!(aggregate(&rows, Averaging::Class).unseen_miou, None);
    }

    #[test]
    fn hand_built_buckets() {
        let rows = vec![
            row("a", "tie", false, 0.8, 1),
            row("b", "tie", false, 0.4, 1),
            row("c", "cup", false, 0.3, 3),
            row("d", "cat", true, 0.9, 3),
        ];
        let b = distractor_analysis(&rows);
        assert_eq!(b.len(), 2);
        assert_eq!(b[&1], Bucket { instances: 2, mean_iou: (0.8 + 0.4) / 2.0 });
        assert_eq!(b[&3], Bucket { instances: 1, mean_iou: 0.3 });
        assert_eq!(b.values().map(|x| x.instances).sum::<usize>(), 3);
    }

    #[test]
    fn tampered_report_fails_check() {
        let rows = vec![row("a", "cat", true, 1.0, 1), row("c", "tie", false, 0.5, 2)];
        let mut r = EvalReport::from_rows(setup(), rows, Averaging::Instance);
        r.check().unwrap();
        r.per_instance[0].iou = 0.2;
        assert!(matches!(r.check(), Err(EvalError::Inconsistent(_))));
    }

    #[test]
    fn writes_json_and_csv() {
        let rows = vec![row("a,1", "cat", true, 1.0, 1), row("c", "tie", false, 0.5, 2)];
        let r = EvalReport::from_rows(setup(), rows, Averaging::Instance);
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        let back: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(csv.contains("\"a,1\",img,cat,true,1.000000"));
        assert_eq!(csv.lines().count(), 4);
    }
}
