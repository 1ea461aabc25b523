//! Test-time augmentation: stochastic geometric views per test image,
//! aggregated by mean probability or majority vote.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Manifest;
use crate::imaging::{affine_warp, flip_horizontal, normalize_for, read_image, rotate, run_pipeline_unnormalized, Image, ImageError, PipelineSpec};
use crate::metrics::{compute_metrics, confusion, MetricsReport};
use crate::model::{argmax, image_to_planar, softmax, ModelError, ModelSpec, ParamVector};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

#[derive(Debug, Error)]
pub enum TtaError {
    #[error("invalid tta policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TtaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanProb,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaPolicy {
    pub k: usize,
    pub flip_prob: f64,
    /// Rotation angle is uniform in `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    pub rotation_prob: f64,
    /// Translation is uniform within `± translate_frac` of the side length.
    pub translate_frac: f64,
    pub scale_range: [f64; 2],
    pub affine_prob: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for TtaPolicy {
    fn default() -> Self {
        Self {
            k: 10,
            flip_prob: 0.5,
            rotation_degrees: 10.0,
            rotation_prob: 0.5,
            translate_frac: 0.05,
            scale_range: [0.95, 1.05],
            affine_prob: 0.5,
            aggregation: Aggregation::MeanProb,
            seed: 0,
        }
    }
}

impl TtaPolicy {
    /// `k` untransformed views.
    pub fn identity(k: usize) -> Self {
        Self { k, flip_prob: 0.0, rotation_prob: 0.0, affine_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TtaError::Policy(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("rotation_prob", self.rotation_prob), ("affine_prob", self.affine_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return bad(format!("rotation_degrees {} must be finite and nonnegative", self.rotation_degrees));
        }
        if !(0.0..0.5).contains(&self.translate_frac) {
            return bad(format!("translate_frac {} outside [0, 0.5)", self.translate_frac));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale_range [{lo}, {hi}] must satisfy 0 < min <= max"));
        }
        Ok(())
    }
}

/// One drawn transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub flip: bool,
    pub rotation_degrees: Option<f64>,
    /// `(ty, tx, scale)` with translations as fractions of the side length.
    pub affine: Option<(f64, f64, f64)>,
}

impl ViewTransform {
    pub const IDENTITY: Self = Self { flip: false, rotation_degrees: None, affine: None };

    /// Flip, then rotation, then affine.
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = if self.flip { flip_horizontal(img) } else { img.clone() };
        if let Some(deg) = self.rotation_degrees {
            out = rotate(&out, deg);
        }
        if let Some((ty, tx, scale)) = self.affine {
            out = affine_warp(&out, ty * out.height() as f64, tx * out.width() as f64, scale);
        }
        out
    }
}

/// Seed for one view: a hash of the base seed, run index, sample id and view
/// index, so evaluation order never matters.
pub fn view_seed(base: u64, run: u64, sample_id: &str, view: u64) -> u64 {
    derive_seed(base, &[run, fnv1a64(sample_id.as_bytes()), view])
}

pub fn draw_transform(policy: &TtaPolicy, seed: u64) -> ViewTransform {
    let mut rng = SplitMix64::new(seed);
    let flip = rng.bernoulli(policy.flip_prob);
    let rotation_degrees = rng.bernoulli(policy.rotation_prob).then(|| rng.uniform(-policy.rotation_degrees, policy.rotation_degrees));
    let affine = rng.bernoulli(policy.affine_prob).then(|| {
        let t = policy.translate_frac;
        let ty = rng.uniform(-t, t);
        let tx = rng.uniform(-t, t);
        let scale = rng.uniform(policy.scale_range[0], policy.scale_range[1]);
        (ty, tx, scale)
    });
    ViewTransform { flip, rotation_degrees, affine }
}

/// The transforms used for one image. `k = 1` is the deterministic path:
/// a single untransformed view.
pub fn view_transforms(policy: &TtaPolicy, run: u64, sample_id: &str) -> Vec<ViewTransform> {
    if policy.k == 1 {
        return vec![ViewTransform::IDENTITY];
    }
    (0..policy.k as u64).map(|v| draw_transform(policy, view_seed(policy.seed, run, sample_id, v))).collect()
}

/// Normalized views of a pipeline-processed, not yet normalized image.
pub fn sample_views(staged: &Image, pipeline: &PipelineSpec, policy: &TtaPolicy, run: u64, sample_id: &str) -> Result<Vec<Image>> {
    policy.validate()?;
    view_transforms(policy, run, sample_id).iter().map(|t| Ok(normalize_for(&t.apply(staged), pipeline)?)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub view_index: usize,
    pub probs: Vec<f64>,
    pub argmax_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPrediction {
    pub final_class: usize,
    /// Mean probabilities, or vote fractions under majority vote.
    pub final_probs: Vec<f64>,
    pub views: Vec<ViewPrediction>,
}

/// Combine per-view probability vectors. Majority-vote ties go to the lowest
/// class index.
pub fn aggregate(views: &[Vec<f64>], aggregation: Aggregation) -> (usize, Vec<f64>) {
    assert!(!views.is_empty(), "aggregate needs at least one view");
    let c = views[0].len();
    let k = views.len() as f64;
    let probs = match aggregation {
        Aggregation::MeanProb => {
            let mut acc = vec![0f64; c];
            for v in views {
                for (a, p) in acc.iter_mut().zip(v) {
                    *a += p;
                }
            }
            acc.iter().map(|a| a / k).collect::<Vec<_>>()
        }
        Aggregation::MajorityVote => {
            let mut votes = vec![0usize; c];
            for v in views {
                votes[argmax(v)] += 1;
            }
            votes.iter().map(|&n| n as f64 / k).collect()
        }
    };
    (argmax(&probs), probs)
}

pub fn predict_tta(
    params: &ParamVector,
    spec: &ModelSpec,
    staged: &Image,
    pipeline: &PipelineSpec,
    policy: &TtaPolicy,
    run: u64,
    sample_id: &str,
) -> Result<TtaPrediction> {
    params.check_spec(spec)?;
    let views = sample_views(staged, pipeline, policy, run, sample_id)?;
    let preds = views
        .iter()
        .enumerate()
        .map(|(view_index, v)| {
            let logits = crate::model::forward_planar(params, spec, &image_to_planar::<f32>(v))?;
            let probs = softmax(&logits);
            Ok(ViewPrediction { view_index, argmax_class: argmax(&probs), probs })
        })
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let (final_class, final_probs) = aggregate(&probs, policy.aggregation);
    Ok(TtaPrediction { final_class, final_probs, views: preds })
}

/// Test images decoded and run through the pipeline up to normalization.
#[derive(Debug, Clone)]
pub struct StagedSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

pub fn stage_manifest(manifest: &Manifest, pipeline: &PipelineSpec) -> Result<StagedSet> {
    let images = manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = read_image(&e.path).map_err(|source| ModelError::Sample { sample_id: e.sample_id.clone(), source })?;
            run_pipeline_unnormalized(&img, pipeline).map_err(|source| TtaError::Model(ModelError::Sample { sample_id: e.sample_id.clone(), source }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StagedSet {
        ids: manifest.entries.iter().map(|e| e.sample_id.clone()).collect(),
        images,
        labels: manifest.entries.iter().map(|e| e.label).collect(),
    })
}

/// Per-run metrics with mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTable {
    pub runs: Vec<MetricsReport>,
    /// Accuracy, precision, recall, F1.
    pub mean: [f64; 4],
    pub std: [f64; 4],
    /// Set when only one run exists and the std is reported as 0.
    pub std_undefined: bool,
}

impl RunTable {
    pub fn from_runs(runs: Vec<MetricsReport>) -> Self {
        let n = runs.len() as f64;
        let mut mean = [0f64; 4];
        for r in &runs {
            for (m, v) in mean.iter_mut().zip(r.csv_fields()) {
                *m += v / n;
            }
        }
        let mut std = [0f64; 4];
        let std_undefined = runs.len() < 2;
        if !std_undefined {
            for (j, s) in std.iter_mut().enumerate() {
                let ss: f64 = runs.iter().map(|r| (r.csv_fields()[j] - mean[j]).powi(2)).sum();
                *s = (ss / (n - 1.0)).sqrt();
            }
        }
        Self { runs, mean, std, std_undefined }
    }

    /// `run,accuracy,precision,recall,f1` with one row per run, then `mean`
    /// and `std` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["run", "accuracy", "precision", "recall", "f1"])?;
        let row = |label: String, v: [f64; 4]| -> Vec<String> {
            std::iter::once(label).chain(v.iter().map(|x| format!("{x:.17}"))).collect()
        };
        for (i, r) in self.runs.iter().enumerate() {
            w.write_record(row(i.to_string(), r.csv_fields()))?;
        }
        w.write_record(row("mean".into(), self.mean))?;
        w.write_record(row("std".into(), self.std))?;
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate_staged(params: &ParamVector, spec: &ModelSpec, staged: &StagedSet, pipeline: &PipelineSpec, policy: &TtaPolicy, run: u64) -> Result<MetricsReport> {
    let preds = staged
        .images
        .par_iter()
        .zip(staged.ids.par_iter())
        .map(|(img, id)| predict_tta(params, spec, img, pipeline, policy, run, id).map(|p| p.final_class))
        .collect::<Result<Vec<_>>>()?;
    let cm = confusion(&staged.labels, &preds, spec.num_classes).map_err(|e| TtaError::Eval(e.to_string()))?;
    compute_metrics(&cm).map_err(|e| TtaError::Eval(e.to_string()))
}

/// Full test-set TTA evaluation repeated `num_runs` times; run `r` uses run
/// index `r` in the view seeds.
pub fn evaluate_tta_runs(
    params: &ParamVector,
    spec: &ModelSpec,
    test_manifest: &Manifest,
    pipeline: &PipelineSpec,
    policy: &TtaPolicy,
    num_runs: usize,
) -> Result<RunTable> {
    if num_runs == 0 {
        return Err(TtaError::Policy("num_runs must be at least 1".into()));
    }
    policy.validate()?;
    let staged = stage_manifest(test_manifest, pipeline)?;
    let runs = (0..num_runs as u64).map(|r| evaluate_staged(params, spec, &staged, pipeline, policy, r)).collect::<Result<Vec<_>>>()?;
    Ok(RunTable::from_runs(runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn staged(seed: u64) -> Image {
        let mut rng = SplitMix64::new(seed);
        Image::new(16, 16, 3, (0..16 * 16 * 3).map(|_| rng.next_f64() as f32).collect()).unwrap()
    }

    #[test]
    fn default_policy_matches_protocol() {
        let p = TtaPolicy::default();
        assert_eq!(p.k, 10);
        assert_eq!((p.flip_prob, p.rotation_prob, p.affine_prob), (0.5, 0.5, 0.5));
        assert_eq!(p.rotation_degrees, 10.0);
        assert_eq!(p.translate_frac, 0.05);
        assert_eq!(p.scale_range, [0.95, 1.05]);
        p.validate().unwrap();
        assert!(TtaPolicy { k: 0, ..p.clone() }.validate().is_err());
        assert!(TtaPolicy { flip_prob: 1.2, ..p.clone() }.validate().is_err());
        assert!(TtaPolicy { scale_range: [1.1, 0.9], ..p }.validate().is_err());
    }

    #[test]
    fn zero_probability_views_equal_deterministic_path() {
        let img = staged(1);
        let pipe = PipelineSpec::original(16).unwrap();
        let views = sample_views(&img, &pipe, &TtaPolicy::identity(5), 0, "a").unwrap();
        let plain = normalize_for(&img, &pipe).unwrap();
        assert_eq!(views.len(), 5);
        assert!(views.iter().all(|v| *v == plain));
    }

    #[test]
    fn views_are_seeded_by_run_sample_and_view() {
        let img = staged(2);
        let pipe = PipelineSpec::original(16).unwrap();
        let policy = TtaPolicy { flip_prob: 1.0, rotation_prob: 1.0, affine_prob: 1.0, ..TtaPolicy::default() };
        let a = sample_views(&img, &pipe, &policy, 3, "x/1.pgm").unwrap();
        assert_eq!(a, sample_views(&img, &pipe, &policy, 3, "x/1.pgm").unwrap());
        assert_ne!(a, sample_views(&img, &pipe, &policy, 4, "x/1.pgm").unwrap());
        assert_ne!(a, sample_views(&img, &pipe, &policy, 3, "x/2.pgm").unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn drawn_parameters_stay_in_range() {
        let policy = TtaPolicy { flip_prob: 1.0, rotation_prob: 1.0, affine_prob: 1.0, ..TtaPolicy::default() };
        let mut flips = 0;
        let half = TtaPolicy::default();
        for v in 0..2000 {
            let t = draw_transform(&policy, view_seed(9, 0, "s", v));
            assert!(t.flip);
            let r = t.rotation_degrees.unwrap();
            assert!((-10.0..=10.0).contains(&r));
            let (ty, tx, s) = t.affine.unwrap();
            assert!(ty.abs() <= 0.05 && tx.abs() <= 0.05);
            assert!((0.95..=1.05).contains(&s));
            flips += usize::from(draw_transform(&half, view_seed(9, 0, "s", v)).flip);
        }
        // Binomial(2000, 0.5): 6 sigma is about 134.
        assert!((flips as i64 - 1000).abs() < 134, "{flips}");
    }

    #[test]
    fn flip_view_twice_restores() {
        let img = staged(3);
        let t = ViewTransform { flip: true, ..ViewTransform::IDENTITY };
        assert_eq!(t.apply(&t.apply(&img)), img);
        let r0 = ViewTransform { rotation_degrees: Some(0.0), ..ViewTransform::IDENTITY };
        assert_eq!(r0.apply(&img), img);
    }

    #[test]
    fn k1_is_plain_inference() {
        let spec = ModelSpec::tiny_conv_net(16, 4);
        let params = init_params(&spec, 8).unwrap();
        let pipe = PipelineSpec::original(16).unwrap();
        for s in 0..5 {
            let img = staged(10 + s);
            let plain = crate::model::forward(&params, &spec, &[normalize_for(&img, &pipe).unwrap()]).unwrap();
            let plain_probs = softmax(&plain[0]);
            for agg in [Aggregation::MeanProb, Aggregation::MajorityVote] {
                // Even a policy with nonzero probabilities degenerates at K = 1.
                for policy in [TtaPolicy { k: 1, aggregation: agg, ..TtaPolicy::identity(1) }, TtaPolicy { k: 1, aggregation: agg, ..TtaPolicy::default() }] {
                    let p = predict_tta(&params, &spec, &img, &pipe, &policy, 0, "id").unwrap();
                    assert_eq!(p.final_class, argmax(&plain_probs));
                    if agg == Aggregation::MeanProb {
                        assert_eq!(p.final_probs, plain_probs);
                    }
                }
            }
        }
    }

    #[test]
    fn vote_example() {
        let views = vec![vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]];
        let (class, probs) = aggregate(&views, Aggregation::MajorityVote);
        assert_eq!(class, 0);
        assert_eq!(probs, vec![2.0 / 3.0, 1.0 / 3.0]);
        // A one-one tie goes to the lower index.
        let (class, _) = aggregate(&[vec![0.1, 0.9], vec![0.9, 0.1]], Aggregation::MajorityVote);
        assert_eq!(class, 0);
    }

    #[test]
    fn run_table_statistics() {
        let report = |a: f64| MetricsReport { accuracy: a, precision: a / 2.0, recall: a, f1: a, per_class: vec![] };
        let single = RunTable::from_runs(vec![report(0.8)]);
        assert!(single.std_undefined);
        assert_eq!(single.mean[0], 0.8);
        assert_eq!(single.std, [0.0; 4]);
        let t = RunTable::from_runs(vec![report(0.8), report(0.9), report(1.0)]);
        assert!(!t.std_undefined);
        assert!((t.mean[0] - 0.9).abs() < 1e-15);
        assert!((t.std[0] - 0.1).abs() < 1e-12);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,accuracy,precision,recall,f1");
        assert_eq!(lines.len(), 6);
        assert!(lines[4].starts_with("mean,"));
        assert!(lines[5].starts_with("std,"));
    }

    fn probs_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.001f64..1.0, 4), 1..12)
            .prop_map(|vs| vs.into_iter().map(|v| { let s: f64 = v.iter().sum(); v.into_iter().map(|x| x / s).collect() }).collect())
    }

    proptest! {
        #[test]
        fn mean_prob_is_a_distribution(views in probs_strategy()) {
            let (class, probs) = aggregate(&views, Aggregation::MeanProb);
            prop_assert!(probs.iter().all(|&p| p >= 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(class, argmax(&probs));
        }

        #[test]
        fn view_order_is_irrelevant(views in probs_strategy(), rot in 0usize..12) {
            let mut rotated = views.clone();
            let n = rotated.len();
            rotated.rotate_left(rot % n);
            let (a, pa) = aggregate(&views, Aggregation::MeanProb);
            let (b, pb) = aggregate(&rotated, Aggregation::MeanProb);
            prop_assert_eq!(a, b);
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(aggregate(&views, Aggregation::MajorityVote), aggregate(&rotated, Aggregation::MajorityVote));
        }

        #[test]
        fn vote_ignores_rescaling(views in probs_strategy(), scales in prop::collection::vec(0.1f64..10.0, 12)) {
            let scaled: Vec<Vec<f64>> = views.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            prop_assert_eq!(aggregate(&views, Aggregation::MajorityVote), aggregate(&scaled, Aggregation::MajorityVote));
        }
    }
}
