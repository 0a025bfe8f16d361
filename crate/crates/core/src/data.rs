//! Trajectory ingestion, preprocessing and synthetic generators.
//!
//! Trajectory files are CSV with a `t,x1,...,xn` header and one sample per
//! line. A dataset manifest lists one `path,split` entry per line, where
//! `split` is `train` or `validation` and relative paths resolve against the
//! manifest's directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Default resampling step in seconds.
pub const DEFAULT_DT: f64 = 0.1;

/// Timestamped state sequence. States are stored column-wise (`n x T`).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: DenseMatrix,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: DenseMatrix) -> Result<Self> {
        if times.len() != states.cols() {
            return Err(Error::dim(
                "Trajectory::new",
                format!("{} timestamps for {} samples", times.len(), states.cols()),
            ));
        }
        if times.len() < 2 {
            return Err(Error::Data(format!(
                "a trajectory needs at least 2 samples, got {}",
                times.len()
            )));
        }
        if !states.is_finite() || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("non-finite trajectory entry".into()));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at sample {}: {} then {}",
                k + 1,
                times[k],
                times[k + 1]
            )));
        }
        Ok(Self { times, states })
    }

    /// Uniformly sampled trajectory starting at `t = 0`.
    pub fn uniform(dt: f64, states: DenseMatrix) -> Result<Self> {
        let times = (0..states.cols()).map(|k| k as f64 * dt).collect();
        Self::new(times, states)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.rows()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &DenseMatrix {
        &self.states
    }

    pub fn state(&self, k: usize) -> Vec<f64> {
        self.states.col(k)
    }

    pub fn first(&self) -> Vec<f64> {
        self.state(0)
    }

    pub fn last(&self) -> Vec<f64> {
        self.state(self.len() - 1)
    }

    fn map_states(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let mut states = self.states.clone();
        for i in 0..states.rows() {
            for v in states.row_mut(i) {
                *v = f(i, *v);
            }
        }
        Self {
            times: self.times.clone(),
            states,
        }
    }
}

/// Linear interpolation onto `t0, t0 + dt, ...` up to the last timestamp.
pub fn resample(traj: &Trajectory, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!(
            "resampling step must be positive, got {dt}"
        )));
    }
    let t0 = traj.times[0];
    let t_end = traj.times[traj.len() - 1];
    let span = t_end - t0;
    if span < dt {
        return Err(Error::Data(format!(
            "trajectory spans {span} s, shorter than the step {dt} s"
        )));
    }
    let steps = ((span / dt) * (1.0 + 1e-12)).floor() as usize;
    let n = traj.dim();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = DenseMatrix::zeros(n, steps + 1);
    let mut seg = 0;
    for k in 0..=steps {
        let t = (t0 + k as f64 * dt).min(t_end);
        while seg + 2 < traj.len() && traj.times[seg + 1] < t {
            seg += 1;
        }
        let (ta, tb) = (traj.times[seg], traj.times[seg + 1]);
        let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        for i in 0..n {
            let a = traj.states.get(i, seg);
            let b = traj.states.get(i, seg + 1);
            let v = if w == 0.0 {
                a
            } else if w == 1.0 {
                b
            } else {
                a + w * (b - a)
            };
            states.set(i, k, v);
        }
        times.push(t);
    }
    Trajectory::new(times, states)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(Error::Contract(format!(
                "unknown split {other:?} (expected train or validation)"
            ))),
        }
    }
}

/// Affine map applied to every state: `x_model = (x_raw - offset) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessing {
    pub dt: Option<f64>,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Preprocessing {
    pub fn identity(n: usize) -> Self {
        Self {
            dt: None,
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Maps model-space states (`n x T`) back to raw units.
    pub fn invert(&self, states: &DenseMatrix) -> DenseMatrix {
        let mut out = states.clone();
        for i in 0..out.rows() {
            let (o, s) = (self.offset[i], self.scale[i]);
            for v in out.row_mut(i) {
                *v = *v * s + o;
            }
        }
        out
    }

    pub fn apply(&self, states: &DenseMatrix) -> DenseMatrix {
        let mut out = states.clone();
        for i in 0..out.rows() {
            let (o, s) = (self.offset[i], self.scale[i]);
            for v in out.row_mut(i) {
                *v = (*v - o) / s;
            }
        }
        out
    }
}

/// How [`Dataset::center_to_equilibrium`] picks the equilibrium.
#[derive(Clone, Debug, PartialEq)]
pub enum Equilibrium {
    /// Mean final point of the training trajectories.
    FinalPoint,
    Explicit(Vec<f64>),
}

/// Trajectories with a train/validation assignment and the preprocessing
/// applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    splits: Vec<Split>,
    preprocessing: Preprocessing,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, splits: Vec<Split>) -> Result<Self> {
        if trajectories.len() != splits.len() {
            return Err(Error::dim(
                "Dataset::new",
                format!(
                    "{} trajectories, {} split labels",
                    trajectories.len(),
                    splits.len()
                ),
            ));
        }
        let n = trajectories
            .first()
            .map(|t| t.dim())
            .ok_or_else(|| Error::Data("dataset has no trajectories".into()))?;
        if let Some(k) = trajectories.iter().position(|t| t.dim() != n) {
            return Err(Error::Data(format!(
                "trajectory {k} has dimension {}, expected {n}",
                trajectories[k].dim()
            )));
        }
        Ok(Self {
            trajectories,
            splits,
            preprocessing: Preprocessing::identity(n),
        })
    }

    /// All trajectories in the training split.
    pub fn all_train(trajectories: Vec<Trajectory>) -> Result<Self> {
        let splits = vec![Split::Train; trajectories.len()];
        Self::new(trajectories, splits)
    }

    /// Reassigns the last `count` trajectories to validation, the rest to
    /// training.
    pub fn with_validation_tail(mut self, count: usize) -> Result<Self> {
        if count >= self.trajectories.len() {
            return Err(Error::Contract(format!(
                "cannot hold out {count} of {} trajectories",
                self.trajectories.len()
            )));
        }
        let cut = self.trajectories.len() - count;
        for (k, s) in self.splits.iter_mut().enumerate() {
            *s = if k < cut {
                Split::Train
            } else {
                Split::Validation
            };
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    pub fn split(&self, which: Split) -> Vec<&Trajectory> {
        self.trajectories
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(t, _)| t)
            .collect()
    }

    /// Resamples every trajectory at step `dt`.
    pub fn resample(mut self, dt: f64) -> Result<Self> {
        self.trajectories = self
            .trajectories
            .iter()
            .map(|t| resample(t, dt))
            .collect::<Result<_>>()?;
        self.preprocessing.dt = Some(dt);
        Ok(self)
    }

    /// Translates all states so the equilibrium sits at the origin.
    pub fn center_to_equilibrium(mut self, mode: Equilibrium) -> Result<Self> {
        let n = self.dim();
        let point = match mode {
            Equilibrium::Explicit(p) => {
                if p.len() != n {
                    return Err(Error::dim(
                        "center_to_equilibrium",
                        format!("point of length {}, states of dimension {n}", p.len()),
                    ));
                }
                p
            }
            Equilibrium::FinalPoint => {
                let mut pool = self.split(Split::Train);
                if pool.is_empty() {
                    pool = self.trajectories.iter().collect();
                }
                let mut mean = vec![0.0; n];
                for t in &pool {
                    for (m, v) in mean.iter_mut().zip(t.last()) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= pool.len() as f64);
                mean
            }
        };
        // Offsets are expressed in the current model coordinates.
        let scale = self.preprocessing.scale.clone();
        self.trajectories = self
            .trajectories
            .iter()
            .map(|t| t.map_states(|i, v| v - point[i]))
            .collect();
        for i in 0..n {
            self.preprocessing.offset[i] += point[i] * scale[i];
        }
        Ok(self)
    }

    /// Per-dimension scaling to unit max-abs over the training split.
    pub fn normalize(mut self) -> Result<Self> {
        let n = self.dim();
        let mut pool = self.split(Split::Train);
        if pool.is_empty() {
            pool = self.trajectories.iter().collect();
        }
        let mut max_abs = vec![0.0_f64; n];
        for t in pool {
            for (i, m) in max_abs.iter_mut().enumerate() {
                *m = t.states.row(i).iter().fold(*m, |a, v| a.max(v.abs()));
            }
        }
        let factors: Vec<f64> = max_abs
            .iter()
            .map(|m| if *m > 0.0 { *m } else { 1.0 })
            .collect();
        self.trajectories = self
            .trajectories
            .iter()
            .map(|t| t.map_states(|i, v| v / factors[i]))
            .collect();
        for (s, f) in self.preprocessing.scale.iter_mut().zip(&factors) {
            *s *= f;
        }
        Ok(self)
    }

    /// Applies a recorded preprocessing to raw data, e.g. the one a model
    /// was trained under.
    pub fn with_preprocessing(self, p: &Preprocessing) -> Result<Self> {
        if self.preprocessing != Preprocessing::identity(self.dim()) {
            return Err(Error::Contract("dataset is already preprocessed".into()));
        }
        if p.offset.len() != self.dim() || p.scale.len() != self.dim() {
            return Err(Error::dim(
                "with_preprocessing",
                format!(
                    "preprocessing for dimension {}, data of dimension {}",
                    p.offset.len(),
                    self.dim()
                ),
            ));
        }
        let mut ds = match p.dt {
            Some(dt) => self.resample(dt)?,
            None => self,
        };
        ds.trajectories = ds
            .trajectories
            .iter()
            .map(|t| Trajectory {
                times: t.times.clone(),
                states: p.apply(&t.states),
            })
            .collect();
        ds.preprocessing = p.clone();
        Ok(ds)
    }

    /// Trajectory `k` in raw units.
    pub fn raw_trajectory(&self, k: usize) -> Trajectory {
        let t = &self.trajectories[k];
        Trajectory {
            times: t.times.clone(),
            states: self.preprocessing.invert(&t.states),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses one `t,x1,...,xn` trajectory CSV.
pub fn parse_trajectory_csv(text: &str, origin: &Path) -> Result<Trajectory> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty trajectory file", origin.display())))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    if fields.len() < 2 || fields[0] != "t" {
        return Err(parse_err(
            origin,
            hline + 1,
            "expected header `t,x1,...,xn`",
        ));
    }
    let n = fields.len() - 1;
    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines {
        let values = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| {
                    parse_err(
                        origin,
                        lineno + 1,
                        format!("bad number {:?}: {e}", f.trim()),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != n + 1 {
            return Err(parse_err(
                origin,
                lineno + 1,
                format!("expected {} fields, found {}", n + 1, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(origin, lineno + 1, "non-finite value"));
        }
        times.push(values[0]);
        columns.push(values[1..].to_vec());
    }
    if columns.is_empty() {
        return Err(Error::Data(format!("{}: no samples", origin.display())));
    }
    let states = DenseMatrix::from_columns(&columns)?;
    Trajectory::new(times, states).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", origin.display())),
        other => other,
    })
}

pub fn load_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(&text, path)
}

pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut s = String::from("t");
    for i in 1..=traj.dim() {
        s.push_str(&format!(",x{i}"));
    }
    s.push('\n');
    for k in 0..traj.len() {
        s.push_str(&format!("{:?}", traj.times[k]));
        for i in 0..traj.dim() {
            s.push_str(&format!(",{:?}", traj.states.get(i, k)));
        }
        s.push('\n');
    }
    s
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, trajectory_to_csv(traj)).map_err(|e| Error::io(path, e))
}

/// Input layouts accepted by [`load_trajectories`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFormat {
    CsvPerTrajectory,
    DirectoryOfCsv,
}

/// Loads one CSV file, or every `*.csv` file in a directory in name order.
pub fn load_trajectories(path: &Path, format: SourceFormat) -> Result<Vec<Trajectory>> {
    match format {
        SourceFormat::CsvPerTrajectory => Ok(vec![load_trajectory_csv(path)?]),
        SourceFormat::DirectoryOfCsv => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("no .csv files in {}", path.display())));
            }
            files.iter().map(|f| load_trajectory_csv(f)).collect()
        }
    }
}

/// Reads a `path,split` manifest.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut trajectories = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, split) = line
            .rsplit_once(',')
            .ok_or_else(|| parse_err(path, lineno + 1, "expected `path,split`"))?;
        let split: Split = split
            .trim()
            .parse()
            .map_err(|e: Error| parse_err(path, lineno + 1, e.to_string()))?;
        let file = Path::new(file.trim());
        let resolved = if file.is_absolute() {
            file.to_path_buf()
        } else {
            base.join(file)
        };
        trajectories.push(load_trajectory_csv(&resolved)?);
        splits.push(split);
    }
    Dataset::new(trajectories, splits)
}

/// Writes every trajectory of `dataset` in raw units plus a manifest into
/// `dir`; returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for k in 0..dataset.len() {
        let name = format!("{stem}_{k:02}.csv");
        write_trajectory_csv(&dataset.raw_trajectory(k), &dir.join(&name))?;
        manifest.push_str(&format!("{name},{}\n", dataset.splits[k].name()));
    }
    let mpath = dir.join(format!("{stem}.manifest"));
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Parameters of the rotating, decaying linear system `x+ = rho R(theta) x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpiralSpec {
    pub n_traj: usize,
    pub length: usize,
    pub dt: f64,
    /// Per-step contraction `rho` in `(0, 1)`.
    pub decay: f64,
    /// Rotation rate in rad/s; the per-step angle is `angular_rate * dt`.
    pub angular_rate: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self {
            n_traj: 7,
            length: 60,
            dt: DEFAULT_DT,
            decay: 0.95,
            angular_rate: 2.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SpiralSpec {
    /// The exact one-step matrix `rho R(theta)`.
    pub fn generator(&self) -> DenseMatrix {
        let th = self.angular_rate * self.dt;
        DenseMatrix::from_raw(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()]).scale(self.decay)
    }
}

/// Trajectories of `x+ = rho R(theta) x` from random starts in `[-1, 1]^2`,
/// all assigned to the training split.
pub fn synth_stable_spiral(spec: &SpiralSpec) -> Result<Dataset> {
    if !(spec.decay > 0.0 && spec.decay < 1.0) {
        return Err(Error::Contract(format!(
            "decay must lie in (0, 1), got {}",
            spec.decay
        )));
    }
    if spec.length < 2 || spec.n_traj == 0 {
        return Err(Error::Contract(
            "need at least one trajectory of 2 samples".into(),
        ));
    }
    let a = spec.generator();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let mut trajs = Vec::with_capacity(spec.n_traj);
    for _ in 0..spec.n_traj {
        let mut x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut cols = Vec::with_capacity(spec.length);
        for _ in 0..spec.length {
            let observed: Vec<f64> = if spec.noise > 0.0 {
                x.iter().map(|v| v + noise.sample(&mut rng)).collect()
            } else {
                x.clone()
            };
            cols.push(observed);
            x = a.mul_vec(&x)?;
        }
        trajs.push(Trajectory::uniform(
            spec.dt,
            DenseMatrix::from_columns(&cols)?,
        )?);
    }
    Dataset::all_train(trajs)
}

/// Planar curve families standing in for handwritten motions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    SCurve,
    Hook,
    SpiralIn,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::SCurve => "s-curve",
            ShapeKind::Hook => "hook",
            ShapeKind::SpiralIn => "spiral-in",
        }
    }

    /// Point at progress `u` in `[0, 1]`; every family ends at the origin.
    fn point(self, u: f64, p: &ShapeParams) -> [f64; 2] {
        let rest = 1.0 - u;
        let raw = match self {
            ShapeKind::SCurve => [
                -40.0 * p.amplitude * rest,
                12.0 * p.amplitude * p.bend * (2.0 * PI * u).sin(),
            ],
            ShapeKind::Hook => [
                -30.0 * p.amplitude * rest + 10.0 * p.bend * (PI * u).sin(),
                25.0 * p.amplitude * rest * rest - 8.0 * p.bend * (PI * u).sin(),
            ],
            ShapeKind::SpiralIn => {
                let r = 30.0 * p.amplitude * rest;
                let ang = 2.5 * PI * p.bend * u;
                [r * ang.cos(), r * ang.sin()]
            }
        };
        let (c, s) = (p.rotation.cos(), p.rotation.sin());
        [c * raw[0] - s * raw[1], s * raw[0] + c * raw[1]]
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s-curve" => Ok(ShapeKind::SCurve),
            "hook" => Ok(ShapeKind::Hook),
            "spiral-in" => Ok(ShapeKind::SpiralIn),
            other => Err(Error::Contract(format!(
                "unknown shape {other:?} (expected s-curve, hook or spiral-in)"
            ))),
        }
    }
}

struct ShapeParams {
    amplitude: f64,
    bend: f64,
    rotation: f64,
}

/// Parameters for [`synth_handwriting_like`].
#[derive(Clone, Debug, PartialEq)]
pub struct HandwritingSpec {
    pub n_traj: usize,
    pub shape: ShapeKind,
    pub noise: f64,
    pub seed: u64,
    pub dt: f64,
    /// Duration of each demonstration in seconds.
    pub duration: f64,
}

impl Default for HandwritingSpec {
    fn default() -> Self {
        Self {
            n_traj: 7,
            shape: ShapeKind::SCurve,
            noise: 0.0,
            seed: 0,
            dt: DEFAULT_DT,
            duration: 6.0,
        }
    }
}

/// Smooth planar demonstrations in millimetre-like units that decelerate
/// into the origin. Each demonstration perturbs amplitude, curvature and
/// orientation; all land in the training split.
pub fn synth_handwriting_like(spec: &HandwritingSpec) -> Result<Dataset> {
    if spec.n_traj == 0 || !(spec.dt > 0.0) || spec.duration < 2.0 * spec.dt {
        return Err(Error::Contract(
            "need at least one demonstration spanning two steps".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
    let steps = (spec.duration / spec.dt).round() as usize;
    let mut trajs = Vec::with_capacity(spec.n_traj);
    for _ in 0..spec.n_traj {
        let params = ShapeParams {
            amplitude: rng.random_range(0.9..1.1),
            bend: rng.random_range(0.85..1.15),
            rotation: rng.random_range(-0.15..0.15),
        };
        let mut cols = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let s = k as f64 / steps as f64;
            // velocity decays to zero at the target
            let u = 1.0 - (1.0 - s).powi(2);
            let mut p = spec.shape.point(u, &params);
            if k < steps && spec.noise > 0.0 {
                p[0] += noise.sample(&mut rng);
                p[1] += noise.sample(&mut rng);
            }
            cols.push(p.to_vec());
        }
        trajs.push(Trajectory::uniform(
            spec.dt,
            DenseMatrix::from_columns(&cols)?,
        )?);
    }
    Dataset::all_train(trajs)
}
