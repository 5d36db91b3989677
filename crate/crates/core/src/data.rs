//! Time grids, synthetic Gaussian-sequence datasets and CSV marginal I/O.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::ot::SampleBatch;
use crate::points::Points;

/// Ordered time labels `0 = t_0 < … < t_M = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("a time grid needs at least two points"));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(invalid("a time grid must start at 0 and end at 1"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("time grid must be strictly increasing"));
        }
        Ok(Self { times })
    }

    /// `n` equally spaced points on `[0, 1]`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("a uniform grid needs at least two points"));
        }
        let last = (n - 1) as f64;
        Self::new((0..n).map(|i| i as f64 / last).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of intervals `M`.
    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn interval_lengths(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Index of the grid time whose canonical form matches `t`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let key = canonical_time(t);
        self.times.iter().position(|&g| canonical_time(g) == key)
    }
}

pub const GRID_NAMES: [&str; 3] = ["T1", "T2", "T3"];

/// The equidistant grid and the two irregular grids used for the synthetic
/// Gaussian sequences.
pub fn builtin_grids() -> Vec<(&'static str, TimeGrid)> {
    let t1 = vec![0.0, 0.17, 0.33, 0.5, 0.67, 0.83, 1.0];
    let t2 = vec![0.0, 0.08, 0.38, 0.42, 0.54, 0.85, 1.0];
    let t3 = vec![0.0, 0.2, 0.27, 0.3, 0.88, 0.98, 1.0];
    GRID_NAMES
        .iter()
        .zip([t1, t2, t3])
        .map(|(n, t)| (*n, TimeGrid::new(t).expect("builtin grid is valid")))
        .collect()
}

/// Resolves `T1`/`T2`/`T3` or `uniform:<n>`.
pub fn grid_by_name(name: &str) -> Result<TimeGrid> {
    if let Some(n) = name.strip_prefix("uniform:") {
        let n: usize = n
            .parse()
            .map_err(|_| invalid(format!("bad uniform grid size in '{name}'")))?;
        return TimeGrid::uniform(n);
    }
    builtin_grids()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, g)| g)
        .ok_or_else(|| {
            invalid(format!(
                "unknown grid '{name}' (valid: {}, uniform:<n>)",
                GRID_NAMES.join(", ")
            ))
        })
}

/// Decimal form with at most six fractional digits and no trailing zeros.
pub fn canonical_time(t: f64) -> String {
    let s = format!("{t:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" || s.is_empty() {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// One batch of samples per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDataset {
    pub marginals: Vec<SampleBatch>,
    pub grid: TimeGrid,
}

impl MarginalDataset {
    pub fn new(marginals: Vec<SampleBatch>, grid: TimeGrid) -> Result<Self> {
        if marginals.len() != grid.len() {
            return Err(invalid(format!(
                "{} marginals for a grid of {} times",
                marginals.len(),
                grid.len()
            )));
        }
        let dim = marginals[0].dim();
        for (m, &t) in marginals.iter().zip(grid.times()) {
            if m.dim() != dim {
                return Err(invalid("marginals have inconsistent dimensions"));
            }
            if m.source_time != t {
                return Err(invalid(format!(
                    "marginal labelled t = {} does not match grid time {t}",
                    m.source_time
                )));
            }
        }
        Ok(Self { marginals, grid })
    }

    pub fn dim(&self) -> usize {
        self.marginals[0].dim()
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    /// Drops marginal `index` (interior indices only, so the remaining grid
    /// still spans `[0, 1]`).
    pub fn without(&self, index: usize) -> Result<Self> {
        if index == 0 || index + 1 >= self.len() {
            return Err(invalid(format!(
                "held-out index must be interior (1..={}), got {index}",
                self.len().saturating_sub(2)
            )));
        }
        let mut marginals = self.marginals.clone();
        marginals.remove(index);
        let mut times = self.grid.times().to_vec();
        times.remove(index);
        Self::new(marginals, TimeGrid::new(times)?)
    }
}

/// Isotropic Gaussian marginals `N(mean_i, std² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSequenceSpec {
    pub means: Points,
    pub std: f64,
    pub samples: usize,
    /// Size of the separate pool of initial conditions drawn from `ρ_0`.
    pub initial_samples: usize,
    pub seed: u64,
}

impl GaussianSequenceSpec {
    pub fn new(means: Points, seed: u64) -> Self {
        Self {
            means,
            std: 1.0,
            samples: 200,
            initial_samples: 200,
            seed,
        }
    }
}

/// Generated marginals plus held-out initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub dataset: MarginalDataset,
    pub initial: Points,
}

/// Stream reserved for the initial-condition pool.
const INITIAL_STREAM: u64 = u64::MAX;

fn gaussian_batch(mean: &[f64], std: f64, n: usize, rng: &mut ChaCha8Rng) -> Points {
    let d = mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for &m in mean {
            let z: f64 = StandardNormal.sample(rng);
            data.push(m + std * z);
        }
    }
    Points::new(data, n, d).expect("sized buffer")
}

/// Draws every marginal from its own ChaCha stream (stream `i` for marginal
/// `i`) and the initial-condition pool from a reserved stream.
pub fn gen_gaussian_sequence(
    spec: &GaussianSequenceSpec,
    grid: &TimeGrid,
) -> Result<GeneratedData> {
    if spec.means.rows() != grid.len() {
        return Err(invalid(format!(
            "{} means for a grid of {} times",
            spec.means.rows(),
            grid.len()
        )));
    }
    if !spec.means.all_finite() {
        return Err(invalid("means must be finite"));
    }
    if !(spec.std >= 0.0) || !spec.std.is_finite() {
        return Err(invalid(format!(
            "std must be nonnegative, got {}",
            spec.std
        )));
    }
    let marginals = grid
        .times()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let pts = gaussian_batch(spec.means.row(i), spec.std, spec.samples, &mut rng);
            SampleBatch::new(pts, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(INITIAL_STREAM);
    let initial = gaussian_batch(spec.means.row(0), spec.std, spec.initial_samples, &mut rng);
    Ok(GeneratedData {
        dataset: MarginalDataset::new(marginals, grid.clone())?,
        initial,
    })
}

/// Means of the S-shaped sequence: seven points sweeping `x` over `[0, 30]`
/// while `y` rises, falls through zero and rises again.
pub fn s_shape_means() -> Points {
    Points::from_rows(&[
        [0.0, 0.0],
        [5.0, 8.0],
        [10.0, 10.0],
        [15.0, 0.0],
        [20.0, -10.0],
        [25.0, -8.0],
        [30.0, 0.0],
    ])
    .expect("static layout")
}

/// Means of the α-shaped sequence: the polyline loops back and crosses its
/// own first leg between the 2nd and 3rd points.
pub fn alpha_shape_means() -> Points {
    Points::from_rows(&[
        [0.0, 12.0],
        [10.0, 6.0],
        [20.0, 0.0],
        [26.0, 6.0],
        [20.0, 12.0],
        [10.0, 4.0],
        [0.0, 0.0],
    ])
    .expect("static layout")
}

pub const DATASET_NAMES: [&str; 2] = ["s-shape", "alpha-shape"];

pub fn dataset_means(name: &str) -> Result<Points> {
    match name {
        "s-shape" | "s" => Ok(s_shape_means()),
        "alpha-shape" | "alpha" => Ok(alpha_shape_means()),
        other => Err(invalid(format!(
            "unknown dataset '{other}' (valid: {})",
            DATASET_NAMES.join(", ")
        ))),
    }
}

/// Writes `t,x_0,…,x_{d-1}` rows, one per sample.
pub fn save_marginals<W: Write>(data: &MarginalDataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((0..data.dim()).map(|j| format!("x_{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for m in &data.marginals {
        let t = canonical_time(m.source_time);
        for row in m.points.iter_rows() {
            let mut rec = vec![t.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("'{s}' is not a number"),
    })
}

/// Reads marginals written by [`save_marginals`]; every row's time must match
/// a grid time in canonical decimal form.
pub fn load_marginals<R: Read>(r: R, grid: &TimeGrid) -> Result<MarginalDataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() || header.get(0).map(str::trim) != Some("t") {
        return Err(Error::Parse {
            line: 1,
            msg: "expected header 't,x_0,...'".into(),
        });
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "no coordinate columns".into(),
        });
    }
    let mut batches: Vec<Points> = (0..grid.len()).map(|_| Points::zeros(0, dim)).collect();
    let mut rows = 0usize;
    let mut values = Vec::with_capacity(dim);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let t = parse_f64(&rec[0], line)?;
        let idx = grid.index_of(t).ok_or_else(|| Error::Parse {
            line,
            msg: format!("time {} is not on the grid", &rec[0]),
        })?;
        values.clear();
        for f in rec.iter().skip(1) {
            values.push(parse_f64(f, line)?);
        }
        batches[idx].push_row(&values)?;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "file contains no samples".into(),
        });
    }
    let marginals = batches
        .into_iter()
        .zip(grid.times())
        .map(|(p, &t)| SampleBatch::new(p, t))
        .collect::<Result<Vec<_>>>()?;
    MarginalDataset::new(marginals, grid.clone())
}

/// Writes a plain point cloud with header `x_0,…,x_{d-1}`.
pub fn save_points<W: Write>(p: &Points, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..p.dim()).map(|j| format!("x_{j}")))
        .map_err(csv_err)?;
    for row in p.iter_rows() {
        out.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_points<R: Read>(r: R) -> Result<Points> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let dim = rdr.headers().map_err(csv_err)?.len();
    let mut p = Points::zeros(0, dim);
    let mut values = Vec::with_capacity(dim);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim {
            return Err(Error::Parse {
                line,
                msg: format!("expected {dim} fields, found {}", rec.len()),
            });
        }
        values.clear();
        for f in rec.iter() {
            values.push(parse_f64(f, line)?);
        }
        p.push_row(&values)?;
    }
    if p.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "file contains no points".into(),
        });
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub name: String,
    pub times: Vec<f64>,
}
