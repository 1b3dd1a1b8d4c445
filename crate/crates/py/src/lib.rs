//! Python bindings. Videos cross the boundary as `Video` objects; frames
//! are flat row-major `H×W×3` float lists in `[0, 1]`, masks flat `H×W`
//! lists of 0/1.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vedit::denoiser::{Denoiser, EditCode, EditInstruction};
use vedit::diffusion::NoiseSchedule;
use vedit::localadapt::{EditMask, MaskList, MaskSource};
use vedit::metrics::{FlowConfig, MetricsReport};
use vedit::pipeline::{self, BenchCase, RunConfig};
use vedit::synthvid::task_mask_provider;
use vedit::{FrameSequence, Tensor};

fn err(e: vedit::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(seed: u64, settings: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.seed = Some(seed);
    if let Some(d) = settings {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = v.str()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value,
            };
            cfg.set(&key, &value).map_err(err)?;
        }
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyclass(name = "Video", module = "vedit")]
#[derive(Clone)]
struct PyVideo {
    seq: FrameSequence,
}

#[pymethods]
impl PyVideo {
    #[new]
    fn new(frames: Vec<Vec<f32>>, height: usize, width: usize) -> PyResult<Self> {
        let frames = frames
            .into_iter()
            .map(|f| Tensor::new([height, width, 3], f))
            .collect::<vedit::Result<Vec<_>>>()
            .map_err(err)?;
        let seq = FrameSequence::new(frames).map_err(err)?;
        seq.ensure_unit_range("video").map_err(err)?;
        Ok(Self { seq })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            seq: pipeline::read_frames(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::write_frames(&self.seq, &dir).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.seq.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.seq.width()
    }

    fn __len__(&self) -> usize {
        self.seq.len()
    }

    fn frame(&self, index: usize) -> PyResult<Vec<f32>> {
        self.seq
            .frames()
            .get(index)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range 0..{}", self.seq.len())))
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.seq.frames().iter().map(|t| t.data().to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Video({} frames, {}x{})", self.seq.len(), self.seq.height(), self.seq.width())
    }
}

/// A generated benchmark scene: source video, instruction and ground-truth masks.
#[pyclass(name = "Scene", module = "vedit")]
struct PyScene {
    case: BenchCase,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    #[pyo3(signature = (seed, frames = 24, resolution = 32, code = "recolor_fg"))]
    fn generate(seed: u64, frames: usize, resolution: usize, code: &str) -> PyResult<Self> {
        let code = EditCode::parse(code).map_err(err)?;
        Ok(Self {
            case: BenchCase::generate(seed, frames, resolution, code).map_err(err)?,
        })
    }

    #[getter]
    fn video(&self) -> PyVideo {
        PyVideo { seq: self.case.source() }
    }

    #[getter]
    fn instruction(&self) -> String {
        self.case.instruction.to_string()
    }

    /// Ground-truth edit region per frame.
    fn masks(&self) -> Vec<Vec<u8>> {
        task_mask_provider(&self.case.video, &self.case.task)
            .0
            .iter()
            .map(|m| m.data().to_vec())
            .collect()
    }

    /// Tem-Con, Pixel-MSE and edit accuracy of `edited` against this scene.
    fn evaluate<'py>(&self, py: Python<'py>, edited: &PyVideo) -> PyResult<Bound<'py, PyDict>> {
        let r = MetricsReport::evaluate(
            &edited.seq,
            &self.case.source(),
            Some((&self.case.task, &self.case.video.frames)),
            FlowConfig::default(),
        )
        .map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("tem_con", r.tem_con)?;
        d.set_item("pixel_mse", r.pixel_mse)?;
        d.set_item("edit_accuracy", r.edit_accuracy)?;
        Ok(d)
    }
}

#[pyclass(name = "Model", module = "vedit")]
struct PyModel {
    den: Denoiser,
}

#[pymethods]
impl PyModel {
    /// Trains a model; `settings` takes the same keys as a config file.
    #[staticmethod]
    #[pyo3(signature = (seed, settings = None))]
    fn train(py: Python<'_>, seed: u64, settings: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config(seed, settings)?;
        let den = py.allow_threads(|| pipeline::train_model(&cfg, seed, |_, _| {})).map_err(err)?.0;
        Ok(Self { den })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            den: pipeline::load_model(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.den.save(&path).map_err(err)
    }

    /// Edits `video`. `masks` restricts the edit to per-frame regions.
    #[pyo3(signature = (video, instruction, seed, masks = None, settings = None))]
    fn edit(
        &self,
        py: Python<'_>,
        video: &PyVideo,
        instruction: &str,
        seed: u64,
        masks: Option<Vec<Vec<u8>>>,
        settings: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<PyVideo> {
        let cfg = config(seed, settings)?;
        let instr = EditInstruction::parse(instruction).map_err(err)?;
        let (h, w) = (video.seq.height(), video.seq.width());
        let masks = masks
            .map(|ms| {
                ms.into_iter()
                    .map(|m| EditMask::new(h, w, m, MaskSource::External))
                    .collect::<vedit::Result<Vec<_>>>()
                    .map(MaskList)
            })
            .transpose()
            .map_err(err)?;
        let schedule = NoiseSchedule::standard();
        let out = py
            .allow_threads(|| {
                pipeline::run_edit(
                    &cfg,
                    &self.den,
                    &schedule,
                    &video.seq,
                    &instr,
                    masks.as_ref().map(|m| m as &dyn vedit::localadapt::MaskProvider),
                )
            })
            .map_err(err)?;
        Ok(PyVideo { seq: out.frames })
    }
}

/// Canonical form of an instruction string; raises on invalid input.
#[pyfunction]
fn parse_instruction(text: &str) -> PyResult<String> {
    EditInstruction::parse(text).map(|i| i.to_string()).map_err(err)
}

/// Runs the `vedit` command line with `argv` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    let mut args = vec!["vedit".to_string()];
    args.extend(argv);
    py.allow_threads(|| pipeline::cli::cli_main(args))
}

#[pymodule]
#[pyo3(name = "vedit")]
fn vedit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("EDIT_CODES", EditCode::ALL.iter().map(|c| c.name()).collect::<Vec<_>>())?;
    Ok(())
}
