//! Python bindings: scene generation, training, evaluation and the scalar
//! building blocks of the pose denoising pipeline.

use std::path::PathBuf;

use engine::data::{load_checkpoint, save_checkpoint, Dataset, SceneSpec, Skeleton};
use engine::denoise::{alpha_from_ks as alpha_from_ks_impl, gen_pose_queries, Polarity};
use engine::geometry::{keypoint_similarity as ks_impl, Keypoint, KsParams, PersonInstance};
use engine::losses::{hungarian_match as hungarian_impl, ksvf_loss as ksvf_impl, LossConfig, VfParams};
use engine::model::{ModelConfig, ParamStore, PoseModel, Preset};
use engine::numeric::Tensor;
use engine::train::{evaluate, train_loop, TrainConfig};
use engine::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, text: serde_json::Result<String>) -> PyResult<Bound<'py, PyAny>> {
    let text = text.map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn skeleton(name: &str) -> PyResult<Skeleton> {
    match name {
        "human17" => Ok(Skeleton::human17()),
        "star5" => Ok(Skeleton::star5()),
        _ => Err(PyValueError::new_err(format!("unknown skeleton {name:?}"))),
    }
}

fn ks_params(k: usize, kappa: f64) -> PyResult<KsParams> {
    KsParams::uniform(k, kappa).map_err(err)
}

/// Pose transformer with its weights.
#[pyclass(module = "posedn")]
struct Model {
    inner: PoseModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (seed=0, preset="tiny", num_keypoints=17, num_queries=None))]
    fn new(seed: u64, preset: &str, num_keypoints: usize, num_queries: Option<usize>) -> PyResult<Self> {
        let config = config(preset, num_keypoints, num_queries)?;
        Ok(Self {
            inner: PoseModel::new(config, seed).map_err(err)?,
        })
    }

    /// Loads weights written by `save` (or the command-line trainer).
    #[staticmethod]
    #[pyo3(signature = (path, preset="tiny", num_keypoints=17, num_queries=None))]
    fn load(path: PathBuf, preset: &str, num_keypoints: usize, num_queries: Option<usize>) -> PyResult<Self> {
        let params: ParamStore = load_checkpoint(&path).map_err(err)?.into_iter().collect();
        let config = config(preset, num_keypoints, num_queries)?;
        Ok(Self {
            inner: PoseModel::from_params(config, params).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, self.inner.params.iter().map(|(n, t)| (n.as_str(), t))).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    #[getter]
    fn num_keypoints(&self) -> usize {
        self.inner.config.num_keypoints
    }

    /// Predictions for one grayscale image given as rows of pixels in [0, 1].
    /// Keypoints are normalized to the unit square; sorted by score.
    fn predict(&self, image: Vec<Vec<f32>>) -> PyResult<Vec<(Vec<(f64, f64)>, f64)>> {
        let h = image.len();
        let w = image.first().map_or(0, Vec::len);
        if image.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("image rows differ in length"));
        }
        let t = Tensor::new(&[h, w], image.concat()).map_err(err)?;
        let preds = self.inner.predict(&t).map_err(err)?;
        Ok(preds.into_iter().map(|p| (p.keypoints, p.score)).collect())
    }

    /// Trains in place on a dataset directory; returns the logged records.
    #[pyo3(signature = (data_dir, iterations, seed=0, lr=1e-4, batch_size=4, dn_groups=5, kappa=0.1, log_every=10))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        data_dir: PathBuf,
        iterations: usize,
        seed: u64,
        lr: f64,
        batch_size: usize,
        dn_groups: usize,
        kappa: f64,
        log_every: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = Dataset::load(&data_dir).map_err(err)?;
        let ks = ks_params(self.inner.config.num_keypoints, kappa)?;
        let cfg = TrainConfig {
            iterations,
            lr,
            batch_size,
            dn_groups,
            log_every,
            ..TrainConfig::default()
        };
        let trace = train_loop(
            &mut self.inner,
            &cfg,
            &LossConfig::default(),
            &ks,
            &data,
            None,
            seed,
            |_| Ok(()),
        )
        .map_err(err)?;
        json(py, serde_json::to_string(&trace))
    }

    /// AP, AP50, AP75 and AR on a dataset directory.
    #[pyo3(signature = (data_dir, kappa=0.1))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, kappa: f64) -> PyResult<Bound<'py, PyAny>> {
        let data = Dataset::load(&data_dir).map_err(err)?;
        let ks = ks_params(self.inner.config.num_keypoints, kappa)?;
        let report = evaluate(&self.inner, &data, &ks).map_err(err)?;
        json(py, serde_json::to_string(&report))
    }
}

fn config(preset: &str, num_keypoints: usize, num_queries: Option<usize>) -> PyResult<ModelConfig> {
    let preset: Preset = preset.parse().map_err(err)?;
    let base = preset.config();
    let cfg = ModelConfig {
        num_keypoints,
        num_queries: num_queries.unwrap_or(base.num_queries),
        ..base
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Renders `num` scenes with ids `first..first+num` into `out_dir`.
/// Returns the number of people written.
#[pyfunction]
#[pyo3(signature = (out_dir, num, seed, img_size=160, max_persons=4, skeleton="human17", first=0))]
fn generate_dataset(
    out_dir: PathBuf,
    num: usize,
    seed: u64,
    img_size: usize,
    max_persons: usize,
    skeleton: &str,
    first: u64,
) -> PyResult<usize> {
    let spec = SceneSpec::new(img_size, max_persons, self::skeleton(skeleton)?, seed).map_err(err)?;
    let data = Dataset::generate_range(&spec, first, num).map_err(err)?;
    data.save(&out_dir).map_err(err)?;
    Ok(data.annotations.iter().map(|a| a.instances.len()).sum())
}

/// Similarity of a keypoint at distance `d` for object scale `s`.
#[pyfunction]
fn keypoint_similarity(d: f64, s: f64, kappa: f64) -> PyResult<f64> {
    ks_impl(d, s, kappa).map_err(err)
}

/// Displacement length whose similarity is `ks`.
#[pyfunction]
fn alpha_from_ks(ks: f64, s: f64, kappa: f64) -> PyResult<f64> {
    alpha_from_ks_impl(ks, s, kappa).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (q, c, alpha=0.75, gamma=2.0))]
fn ksvf_loss(q: f64, c: f64, alpha: f64, gamma: f64) -> PyResult<f64> {
    Ok(ksvf_impl(q, c, &VfParams::new(alpha, gamma).map_err(err)?))
}

/// Minimum-cost assignment of rows to columns as `(row, col)` pairs.
#[pyfunction]
fn hungarian_match(cost: Vec<Vec<f64>>) -> PyResult<Vec<(usize, usize)>> {
    Ok(hungarian_impl(&cost).map_err(err)?.pairs)
}

/// One noisy copy of a normalized pose given as `(x, y, visible)` triples.
/// Returns the noisy `(x, y)` points and the similarity drawn per keypoint.
#[pyfunction]
#[pyo3(signature = (keypoints, polarity, seed, kappa=0.1))]
fn pose_query(
    keypoints: Vec<(f64, f64, bool)>,
    polarity: &str,
    seed: u64,
    kappa: f64,
) -> PyResult<(Vec<(f64, f64)>, Vec<f64>)> {
    let polarity = match polarity {
        "pos" | "positive" => Polarity::Positive,
        "neg" | "negative" => Polarity::Negative,
        _ => return Err(PyValueError::new_err(format!("unknown polarity {polarity:?}"))),
    };
    let kps: Vec<Keypoint> = keypoints.iter().map(|&(x, y, v)| Keypoint::new(x, y, v)).collect();
    let gt = PersonInstance::from_keypoints(kps, 0.1).map_err(err)?;
    let params = ks_params(keypoints.len(), kappa)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = gen_pose_queries(&gt, polarity, &params, &mut rng).map_err(err)?;
    Ok((s.instance.keypoints.iter().map(|k| (k.x, k.y)).collect(), s.sampled_ks))
}

#[pymodule]
fn posedn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(keypoint_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_from_ks, m)?)?;
    m.add_function(wrap_pyfunction!(ksvf_loss, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian_match, m)?)?;
    m.add_function(wrap_pyfunction!(pose_query, m)?)?;
    Ok(())
}
