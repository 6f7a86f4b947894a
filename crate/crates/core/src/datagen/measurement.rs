use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::ndgrad::Tensor;
use crate::stochastics::RngStream;

pub const DIM_A: usize = 5;
pub const DIM_C: usize = 5;
pub const DIM_X: usize = 10;
pub const CLASSES: usize = 5;

/// Knobs of the measurement generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub rows: usize,
    pub train: usize,
    pub validation: usize,
    /// Noise added to every coordinate of `g(A)` before the argmax.
    pub sigma_y: f64,
    /// Noise added to the standardized children.
    pub sigma_x: f64,
    /// Standard deviation of the coefficients of `f`.
    pub f_scale: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            rows: 1000,
            train: 450,
            validation: 50,
            sigma_y: 0.1,
            sigma_x: 0.1,
            f_scale: 1.0,
        }
    }
}

impl MeasurementConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.train + self.validation >= self.rows || self.train == 0 {
            return Err(DataError::Invalid(format!(
                "{} train + {} validation rows leave no test rows out of {}",
                self.train, self.validation, self.rows
            )));
        }
        if !(self.sigma_y >= 0.0 && self.sigma_x >= 0.0 && self.f_scale > 0.0) {
            return Err(DataError::Invalid("noise scales must be non-negative and f_scale positive".into()));
        }
        Ok(())
    }
}

/// The per-coordinate label score `0.2 a^2 - 0.8 a`.
pub fn g(a: f64) -> f64 {
    0.2 * a * a - 0.8 * a
}

/// `argmax_j g(a_j) + noise_j`, lowest index on ties.
pub fn label_from_parents(a: &[f64], noise: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, (&aj, &nj)) in a.iter().zip(noise).enumerate() {
        let v = g(aj) + nj;
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Structural equations of the measurement data. Every child is a full
/// quadratic form in `v = onehot(y) ++ c`: `b + w.v + v'Qv`, standardized
/// with statistics of the noise-free population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMechanism {
    pub seed: u64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    bias: Vec<f64>,
    /// `[DIM_X, V]`.
    linear: Vec<f64>,
    /// `[DIM_X, V, V]`.
    quadratic: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const V: usize = CLASSES + DIM_C;

impl MeasurementMechanism {
    fn draw(seed: u64, cfg: &MeasurementConfig) -> Self {
        let mut rng = RngStream::new(seed, 0).derive_named("mechanism");
        let s = cfg.f_scale;
        let mut draw = |n: usize| (0..n).map(|_| s * rng.normal()).collect::<Vec<f64>>();
        let bias = draw(DIM_X);
        let linear = draw(DIM_X * V);
        let quadratic = draw(DIM_X * V * V);
        Self {
            seed,
            sigma_y: cfg.sigma_y,
            sigma_x: cfg.sigma_x,
            bias,
            linear,
            quadratic,
            mean: vec![0.0; DIM_X],
            std: vec![1.0; DIM_X],
        }
    }

    /// `f(y, c)` before standardization.
    pub fn raw_children(&self, y: usize, c: &[f64]) -> [f64; DIM_X] {
        let mut v = [0.0; V];
        v[y] = 1.0;
        v[CLASSES..].copy_from_slice(c);
        let mut out = [0.0; DIM_X];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = self.bias[j];
            for p in 0..V {
                s += self.linear[j * V + p] * v[p];
                let row = &self.quadratic[(j * V + p) * V..(j * V + p + 1) * V];
                let qv: f64 = row.iter().zip(&v).map(|(q, vv)| q * vv).sum();
                s += v[p] * qv;
            }
            *o = s;
        }
        out
    }

    /// Standardized noise-free children for every row, `[n, DIM_X]`.
    pub fn children(&self, y: &[usize], c: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[y.len(), DIM_X]);
        for (i, &yi) in y.iter().enumerate() {
            let raw = self.raw_children(yi, c.row(i));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (raw[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementDataset {
    pub a: Tensor,
    pub c: Tensor,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub split: Vec<Split>,
    /// The `sigma_x` noise added to each child, kept so `x` can be regenerated.
    pub x_noise: Tensor,
    pub mechanism_seed: u64,
}

impl MeasurementDataset {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            a: self.a.select_rows(idx),
            c: self.c.select_rows(idx),
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
            x_noise: self.x_noise.select_rows(idx),
            mechanism_seed: self.mechanism_seed,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Self {
        self.select_rows(&self.indices(split))
    }

    /// Writes the CSV form: `a0..a4, c0..c4, x0..x9, y, split`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(csv_header())?;
        for i in 0..self.rows() {
            let mut rec: Vec<String> = Vec::with_capacity(DIM_A + DIM_C + DIM_X + 2);
            for t in [&self.a, &self.c, &self.x] {
                rec.extend(t.row(i).iter().map(|v| format!("{v:?}")));
            }
            rec.push(self.y[i].to_string());
            rec.push(self.split[i].as_str().to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV form. The recorded noise is not part of the file, so it
    /// is left at zero and the mechanism seed at `mechanism_seed`.
    pub fn read_csv<R: Read>(r: R, mechanism_seed: u64) -> Result<Self, DataError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != csv_header() {
            return Err(DataError::Invalid(format!("unexpected CSV header {header:?}")));
        }
        let (mut a, mut c, mut x, mut y, mut split) = (vec![], vec![], vec![], vec![], vec![]);
        for rec in rd.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64, DataError> {
                rec[k].parse().map_err(|_| DataError::Invalid(format!("bad number {:?}", &rec[k])))
            };
            for k in 0..DIM_A {
                a.push(num(k)?);
            }
            for k in 0..DIM_C {
                c.push(num(DIM_A + k)?);
            }
            for k in 0..DIM_X {
                x.push(num(DIM_A + DIM_C + k)?);
            }
            let yk = DIM_A + DIM_C + DIM_X;
            y.push(rec[yk].parse().map_err(|_| DataError::Invalid(format!("bad label {:?}", &rec[yk])))?);
            split.push(Split::parse(&rec[yk + 1])?);
        }
        let n = y.len();
        Ok(Self {
            a: Tensor::new(vec![n, DIM_A], a)?,
            c: Tensor::new(vec![n, DIM_C], c)?,
            x: Tensor::new(vec![n, DIM_X], x)?,
            y,
            split,
            x_noise: Tensor::zeros(&[n, DIM_X]),
            mechanism_seed,
        })
    }
}

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = (0..DIM_A).map(|i| format!("a{i}")).collect();
    h.extend((0..DIM_C).map(|i| format!("c{i}")));
    h.extend((0..DIM_X).map(|i| format!("x{i}")));
    h.push("y".into());
    h.push("split".into());
    h
}

/// Draws the measurement data and its mechanism with default settings.
pub fn generate_measurement(seed: u64) -> (MeasurementDataset, MeasurementMechanism) {
    generate_measurement_with(seed, &MeasurementConfig::default()).expect("default config is valid")
}

pub fn generate_measurement_with(
    seed: u64,
    cfg: &MeasurementConfig,
) -> Result<(MeasurementDataset, MeasurementMechanism), DataError> {
    cfg.validate()?;
    let n = cfg.rows;
    let root = RngStream::new(seed, 0);
    let mut mech = MeasurementMechanism::draw(seed, cfg);
    let a = root.derive_named("a").normal_tensor(&[n, DIM_A]);
    let c = root.derive_named("c").normal_tensor(&[n, DIM_C]);
    let y_noise = root.derive_named("y-noise").normal_tensor(&[n, CLASSES]).map(|v| v * cfg.sigma_y);
    let y: Vec<usize> = (0..n).map(|i| label_from_parents(a.row(i), y_noise.row(i))).collect();

    let raw: Vec<[f64; DIM_X]> = (0..n).map(|i| mech.raw_children(y[i], c.row(i))).collect();
    for j in 0..DIM_X {
        let mean = raw.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = raw.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        mech.mean[j] = mean;
        mech.std[j] = var.sqrt().max(1e-12);
    }
    let x_noise = root.derive_named("x-noise").normal_tensor(&[n, DIM_X]).map(|v| v * cfg.sigma_x);
    let x = mech.children(&y, &c).zip_map(&x_noise, |f, e| f + e);

    let mut order: Vec<usize> = (0..n).collect();
    root.derive_named("split").shuffle(&mut order);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < cfg.train {
            split[i] = Split::Train;
        } else if rank < cfg.train + cfg.validation {
            split[i] = Split::Val;
        }
    }
    let ds = MeasurementDataset {
        a,
        c,
        x,
        y,
        split,
        x_noise,
        mechanism_seed: seed,
    };
    Ok((ds, mech))
}

/// Intervention on the co-parents: `c + delta`, with `x` regenerated through
/// the unchanged mechanism and the recorded noise.
pub fn shift_coparents(
    ds: &MeasurementDataset,
    mech: &MeasurementMechanism,
    delta: f64,
) -> Result<MeasurementDataset, DataError> {
    if ds.mechanism_seed != mech.seed {
        return Err(DataError::MechanismMismatch {
            dataset: ds.mechanism_seed,
            mechanism: mech.seed,
        });
    }
    if !delta.is_finite() {
        return Err(DataError::Invalid(format!("shift {delta} is not finite")));
    }
    let mut out = ds.clone();
    out.c = ds.c.map(|v| v + delta);
    out.x = mech.children(&out.y, &out.c).zip_map(&ds.x_noise, |f, e| f + e);
    Ok(out)
}

/// Intervention on the children only: `x + delta`.
pub fn shift_children(ds: &MeasurementDataset, delta: f64) -> Result<MeasurementDataset, DataError> {
    if !delta.is_finite() {
        return Err(DataError::Invalid(format!("shift {delta} is not finite")));
    }
    let mut out = ds.clone();
    out.x = ds.x.map(|v| v + delta);
    Ok(out)
}
