//! Incident taxonomy and one-vs-rest linear max-margin classification.
//!
//! Each binary problem is an L2-regularised hinge-loss SVM with the bias folded
//! in as a constant feature, solved by dual coordinate descent. Training stops
//! when the projected-gradient spread drops below [`TOLERANCE`].

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

pub const TOLERANCE: f64 = 1e-4;
const MAX_EPOCHS: usize = 5000;

/// Near-miss classes in their fixed order; background is last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentClass {
    HighBicycle,
    HighPedestrian,
    HighVehicle,
    LowBicycle,
    LowPedestrian,
    LowVehicle,
    Background,
}

impl IncidentClass {
    pub const ALL: [IncidentClass; 7] = [
        IncidentClass::HighBicycle,
        IncidentClass::HighPedestrian,
        IncidentClass::HighVehicle,
        IncidentClass::LowBicycle,
        IncidentClass::LowPedestrian,
        IncidentClass::LowVehicle,
        IncidentClass::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            IncidentClass::HighBicycle => "high_bicycle",
            IncidentClass::HighPedestrian => "high_pedestrian",
            IncidentClass::HighVehicle => "high_vehicle",
            IncidentClass::LowBicycle => "low_bicycle",
            IncidentClass::LowPedestrian => "low_pedestrian",
            IncidentClass::LowVehicle => "low_vehicle",
            IncidentClass::Background => "background",
        }
    }

    pub fn is_background(self) -> bool {
        self == IncidentClass::Background
    }
}

impl fmt::Display for IncidentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Six near-miss classes.
    Recognition,
    /// The six near-miss classes plus background.
    Detection,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Recognition => "recognition",
            Task::Detection => "detection",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(Task::Recognition),
            "detection" => Ok(Task::Detection),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub classes: Vec<IncidentClass>,
}

impl TaskSpec {
    pub fn new(task: Task) -> Self {
        let classes = match task {
            Task::Recognition => IncidentClass::ALL[..6].to_vec(),
            Task::Detection => IncidentClass::ALL.to_vec(),
        };
        TaskSpec { task, classes }
    }

    pub fn recognition() -> Self {
        Self::new(Task::Recognition)
    }

    pub fn detection() -> Self {
        Self::new(Task::Detection)
    }

    pub fn position(&self, class: IncidentClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn includes(&self, class: IncidentClass) -> bool {
        self.position(class).is_some()
    }
}

/// Per-class weight vectors and biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel<T> {
    pub task: TaskSpec,
    pub c: f64,
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<T>,
    /// Dual-coordinate-descent epochs used per class.
    pub epochs: Vec<usize>,
}

impl<T: Scalar> LinearModel<T> {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Scores in task class order.
    pub fn scores(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.dim() {
            return Err(Error::dims("classifier input", self.dim(), x.len()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, &b)| dot(w, x) + b)
            .collect())
    }
}

/// Trains one binary problem per task class. Samples whose label is outside
/// the task (background under recognition) are ignored.
pub fn train_ovr<T: Scalar>(
    xs: &[Vec<T>],
    ys: &[IncidentClass],
    task: &TaskSpec,
    c: f64,
    seed: u64,
) -> Result<LinearModel<T>> {
    if xs.len() != ys.len() {
        return Err(Error::CountMismatch {
            context: "training labels".into(),
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if !(c > 0.0) {
        return Err(Error::Invalid(format!("regularisation C must be positive, got {c}")));
    }
    let (samples, labels): (Vec<&[T]>, Vec<usize>) = xs
        .iter()
        .zip(ys)
        .filter_map(|(x, &y)| task.position(y).map(|p| (x.as_slice(), p)))
        .unzip();
    let dim = samples.first().map_or(0, |x| x.len());
    if let Some(bad) = samples.iter().find(|x| x.len() != dim) {
        return Err(Error::dims("training vector", dim, bad.len()));
    }
    for (pos, class) in task.classes.iter().enumerate() {
        if !labels.contains(&pos) {
            return Err(Error::InsufficientData(format!(
                "no training sample for class {class}"
            )));
        }
    }

    let per_class: Vec<(Vec<T>, T, usize)> = (0..task.classes.len())
        .into_par_iter()
        .map(|pos| {
            let targets: Vec<bool> = labels.iter().map(|&l| l == pos).collect();
            let class_seed = seed.wrapping_add((pos as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            train_binary(&samples, &targets, T::lit(c), class_seed)
        })
        .collect();

    let mut weights = Vec::with_capacity(per_class.len());
    let mut bias = Vec::with_capacity(per_class.len());
    let mut epochs = Vec::with_capacity(per_class.len());
    for (w, b, e) in per_class {
        weights.push(w);
        bias.push(b);
        epochs.push(e);
    }
    Ok(LinearModel {
        task: task.clone(),
        c,
        weights,
        bias,
        epochs,
    })
}

/// Dual coordinate descent for the hinge loss; the bias is an extra unit feature.
fn train_binary<T: Scalar>(
    xs: &[&[T]],
    positive: &[bool],
    c: T,
    seed: u64,
) -> (Vec<T>, T, usize) {
    let n = xs.len();
    let dim = xs.first().map_or(0, |x| x.len());
    let mut w = vec![T::zero(); dim];
    let mut b = T::zero();
    let mut alpha = vec![T::zero(); n];
    let sign: Vec<T> = positive
        .iter()
        .map(|&p| if p { T::one() } else { -T::one() })
        .collect();
    let qii: Vec<T> = xs.iter().map(|x| dot(x, x) + T::one()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = T::lit(TOLERANCE);
    let tiny = T::lit(1e-12);

    let mut epoch = 0;
    while epoch < MAX_EPOCHS {
        epoch += 1;
        order.shuffle(&mut rng);
        let mut pg_max = T::neg_infinity();
        let mut pg_min = T::infinity();
        for &i in &order {
            let yi = sign[i];
            let g = yi * (dot(&w, xs[i]) + b) - T::one();
            let pg = if alpha[i] <= T::zero() {
                g.min(T::zero())
            } else if alpha[i] >= c {
                g.max(T::zero())
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > tiny {
                let old = alpha[i];
                let new = (old - g / qii[i]).max(T::zero()).min(c);
                let delta = (new - old) * yi;
                if delta != T::zero() {
                    for (wj, &xj) in w.iter_mut().zip(xs[i]) {
                        *wj += delta * xj;
                    }
                    b += delta;
                }
                alpha[i] = new;
            }
        }
        if pg_max - pg_min < tol {
            break;
        }
    }
    if epoch == MAX_EPOCHS {
        log::warn!("dual coordinate descent hit the {MAX_EPOCHS}-epoch cap");
    }
    (w, b, epoch)
}

/// Arg-max over class scores; ties resolve to the earliest class in task order.
pub fn predict<T: Scalar>(model: &LinearModel<T>, x: &[T]) -> Result<IncidentClass> {
    let scores = model.scores(x)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(model.task.classes[best])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: Task,
    pub classes: Vec<IncidentClass>,
    pub accuracy: f64,
    /// `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    /// Rows are ground truth, columns predictions, both in task order.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(
        task: &TaskSpec,
        truth: &[IncidentClass],
        predicted: &[IncidentClass],
    ) -> Result<Metrics> {
        let k = task.classes.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            let (Some(ti), Some(pi)) = (task.position(t), task.position(p)) else {
                continue;
            };
            confusion[ti][pi] += 1;
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::InsufficientData("empty test set".into()));
        }
        let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Ok(Metrics {
            task: task.task,
            classes: task.classes.clone(),
            accuracy: correct as f64 / total as f64,
            per_class,
            confusion,
        })
    }

    /// Structured plain-text report.
    pub fn report(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("task: {}\n", self.task));
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy));
        out.push_str("per_class_accuracy:\n");
        for (c, a) in self.classes.iter().zip(&self.per_class) {
            match a {
                Some(a) => out.push_str(&format!("  {c}: {a:.4}\n")),
                None => out.push_str(&format!("  {c}: n/a\n")),
            }
        }
        out.push_str(&format!(
            "confusion ({}x{}, rows = truth):\n",
            self.classes.len(),
            self.classes.len()
        ));
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
            out.push_str(&format!("  {:<16}{}\n", c.name(), cells.join("")));
        }
        out
    }
}

/// Predicts every test vector (skipping labels outside the task) and tabulates.
pub fn evaluate<T: Scalar>(
    model: &LinearModel<T>,
    xs: &[Vec<T>],
    ys: &[IncidentClass],
) -> Result<Metrics> {
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for (x, &y) in xs.iter().zip(ys) {
        if !model.task.includes(y) {
            continue;
        }
        truth.push(y);
        predicted.push(predict(model, x)?);
    }
    Metrics::from_predictions(&model.task, &truth, &predicted)
}
