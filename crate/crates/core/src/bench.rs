//! Benchmark functions, Latin hypercube designs and the piston slap data.

use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Dataset;
use crate::tuning::fmt_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Sine,
    Forrester,
    Lim,
    Franke,
    PistonSim,
    Borehole,
}

impl TestFunction {
    pub const ALL: [TestFunction; 6] = [
        TestFunction::Sine,
        TestFunction::Forrester,
        TestFunction::Lim,
        TestFunction::Franke,
        TestFunction::PistonSim,
        TestFunction::Borehole,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunction::Sine => "sine",
            TestFunction::Forrester => "forrester",
            TestFunction::Lim => "lim",
            TestFunction::Franke => "franke",
            TestFunction::PistonSim => "piston_sim",
            TestFunction::Borehole => "borehole",
        }
    }

    /// The one-dimensional demos use fixed equispaced designs.
    pub fn is_demo(self) -> bool {
        matches!(self, TestFunction::Sine | TestFunction::Forrester)
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        TestFunction::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Domain(format!("unknown test function '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub function: TestFunction,
    pub d: usize,
    pub input_lo: Vec<f64>,
    pub input_hi: Vec<f64>,
    pub n_train: usize,
    /// Zero for the demo functions, which have no test set.
    pub n_test: usize,
}

pub fn benchmark_spec(function: TestFunction) -> BenchmarkSpec {
    let (lo, hi, n_train, n_test): (Vec<f64>, Vec<f64>, usize, usize) = match function {
        TestFunction::Sine => (vec![0.0], vec![10.0], 6, 0),
        TestFunction::Forrester => (vec![0.0], vec![1.25], 8, 0),
        TestFunction::Lim => (vec![0.0; 2], vec![1.0; 2], 10, 200),
        TestFunction::Franke => (vec![0.0; 2], vec![1.0; 2], 10, 200),
        TestFunction::PistonSim => (
            // M, S, V0, k, P0, Ta, T0
            vec![30.0, 0.005, 0.002, 1000.0, 90000.0, 290.0, 340.0],
            vec![60.0, 0.020, 0.010, 5000.0, 110000.0, 296.0, 360.0],
            15,
            700,
        ),
        TestFunction::Borehole => (
            // rw, r, Tu, Hu, Tl, Hl, L, Kw
            vec![0.05, 100.0, 63070.0, 990.0, 63.1, 700.0, 1120.0, 9855.0],
            vec![
                0.15, 50000.0, 115600.0, 1110.0, 116.0, 820.0, 1680.0, 12045.0,
            ],
            15,
            800,
        ),
    };
    BenchmarkSpec {
        function,
        d: lo.len(),
        input_lo: lo,
        input_hi: hi,
        n_train,
        n_test,
    }
}

/// Evaluates a test function at a point given in natural units. Ranges are
/// advisory; points outside them are evaluated anyway.
pub fn eval_test_function(function: TestFunction, x: &[f64]) -> Result<f64> {
    let d = benchmark_spec(function).d;
    if x.len() != d {
        return Err(Error::Shape(format!(
            "{function} takes {d} inputs, got {}",
            x.len()
        )));
    }
    let y = match function {
        TestFunction::Sine => x[0].sin(),
        TestFunction::Forrester => (6.0 * x[0] - 2.0).powi(2) * (12.0 * x[0] - 4.0).sin(),
        TestFunction::Lim => {
            let (x1, x2) = (x[0], x[1]);
            ((30.0 + 5.0 * x1 * (5.0 * x1).sin()) * (4.0 + (-5.0 * x2).exp()) - 100.0) / 6.0
        }
        TestFunction::Franke => {
            let (a, b) = (9.0 * x[0], 9.0 * x[1]);
            0.75 * (-(a - 2.0).powi(2) / 4.0 - (b - 2.0).powi(2) / 4.0).exp()
                + 0.75 * (-(a + 1.0).powi(2) / 49.0 - (b + 1.0) / 10.0).exp()
                + 0.5 * (-(a - 7.0).powi(2) / 4.0 - (b - 3.0).powi(2) / 4.0).exp()
                - 0.2 * (-(a - 4.0).powi(2) - (b - 7.0).powi(2)).exp()
        }
        TestFunction::PistonSim => piston_cycle_time(x)?,
        TestFunction::Borehole => {
            let [rw, r, tu, hu, tl, hl, l, kw] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]];
            let log_ratio = (r / rw).ln();
            2.0 * PI * tu * (hu - hl)
                / (log_ratio * (1.0 + 2.0 * l * tu / (log_ratio * rw * rw * kw) + tu / tl))
        }
    };
    if !y.is_finite() {
        return Err(Error::Numeric(format!("{function} is not finite at {x:?}")));
    }
    Ok(y)
}

fn piston_cycle_time(x: &[f64]) -> Result<f64> {
    let [m, s, v0, k, p0, ta, t0] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
    let a = p0 * s + 19.62 * m - k * v0 / s;
    let disc = a * a + 4.0 * k * p0 * v0 / t0 * ta;
    if disc < 0.0 {
        return Err(Error::Numeric(format!(
            "piston discriminant {disc} is negative at {x:?}"
        )));
    }
    let v = s / (2.0 * k) * (disc.sqrt() - a);
    Ok(2.0 * PI * (m / (k + s * s * p0 * v0 / t0 * ta / (v * v))).sqrt())
}

/// Randomized Latin hypercube on `[0, 1)^d`: each column is an independent
/// permutation of the `n` strata with a uniform jitter inside each.
pub fn lhs_design(n: usize, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::Domain(format!(
            "LHS needs n, d >= 1, got n = {n}, d = {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let below_one = 1.0 - f64::EPSILON / 2.0;
    let mut out = DMatrix::zeros(n, d);
    for p in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, &s) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            out[(i, p)] = ((s as f64 + u) / n as f64).min(below_one);
        }
    }
    Ok(out)
}

/// Natural-unit inputs with their responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub inputs: DMatrix<f64>,
    pub responses: Vec<f64>,
}

impl RawTable {
    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    /// Evaluates `function` at each row of `inputs`.
    pub fn evaluate(function: TestFunction, inputs: DMatrix<f64>) -> Result<Self> {
        let responses = inputs
            .row_iter()
            .map(|row| eval_test_function(function, &row.iter().copied().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inputs, responses })
    }

    /// Header `x1..xd,y`, one row per point, shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.d()).map(|p| format!("x{p}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (i, y) in self.responses.iter().enumerate() {
            let mut row: Vec<String> = self.inputs.row(i).iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(*y));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(File::open(path)?, path)
    }

    /// Parses the format written by [`RawTable::write_csv`]; `path` is only
    /// used in error messages.
    pub fn read_csv<R: Read>(input: R, path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedData {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let headers = r.headers().map_err(|e| malformed(e.to_string()))?.clone();
        let d = headers.len().saturating_sub(1);
        let expected: Vec<String> = (1..=d)
            .map(|p| format!("x{p}"))
            .chain(["y".to_string()])
            .collect();
        if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(malformed(format!(
                "expected header {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut values = Vec::new();
        let mut responses = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| malformed(e.to_string()))?;
            if rec.len() != d + 1 {
                return Err(malformed(format!(
                    "row {} has {} fields",
                    line + 1,
                    rec.len()
                )));
            }
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| {
                        malformed(format!(
                            "row {} column {}: '{field}' is not a finite number",
                            line + 1,
                            c + 1
                        ))
                    })?;
                if c < d {
                    values.push(v);
                } else {
                    responses.push(v);
                }
            }
        }
        if responses.is_empty() {
            return Err(malformed("no data rows".into()));
        }
        Ok(Self {
            inputs: DMatrix::from_row_slice(responses.len(), d, &values),
            responses,
        })
    }
}

/// Training design for a test function: equispaced including both endpoints
/// for the demos, otherwise a Latin hypercube of the tabulated size.
pub fn training_table(function: TestFunction, seed: u64) -> Result<RawTable> {
    let spec = benchmark_spec(function);
    let unit = if function.is_demo() {
        let n = spec.n_train;
        DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
    } else {
        lhs_design(spec.n_train, spec.d, seed)?
    };
    RawTable::evaluate(function, to_natural(&unit, &spec))
}

/// Latin hypercube test set of the tabulated size.
pub fn test_table(function: TestFunction, seed: u64) -> Result<RawTable> {
    let spec = benchmark_spec(function);
    if spec.n_test == 0 {
        return Err(Error::Domain(format!("{function} has no test set")));
    }
    let unit = lhs_design(spec.n_test, spec.d, seed)?;
    RawTable::evaluate(function, to_natural(&unit, &spec))
}

fn to_natural(unit: &DMatrix<f64>, spec: &BenchmarkSpec) -> DMatrix<f64> {
    DMatrix::from_fn(unit.nrows(), unit.ncols(), |i, p| {
        spec.input_lo[p] + unit[(i, p)] * (spec.input_hi[p] - spec.input_lo[p])
    })
}

/// Training data of a test function scaled with its declared input ranges.
pub fn training_dataset(function: TestFunction, seed: u64) -> Result<(RawTable, Dataset)> {
    let spec = benchmark_spec(function);
    let table = training_table(function, seed)?;
    let data = Dataset::from_raw(
        &table.inputs,
        &table.responses,
        &spec.input_lo,
        &spec.input_hi,
    )?;
    Ok((table, data))
}

#[rustfmt::skip]
const PISTON_SLAP: [[f64; 7]; 12] = [
    [71.0, 16.8, 21.0, 2.0, 1.0, 0.98, 56.75],
    [15.0, 15.6, 21.8, 1.0, 2.0, 1.30, 57.65],
    [29.0, 14.4, 25.0, 2.0, 1.0, 1.14, 53.97],
    [85.0, 14.4, 21.8, 2.0, 3.0, 0.66, 58.77],
    [29.0, 12.0, 21.0, 3.0, 2.0, 0.82, 56.34],
    [57.0, 12.0, 23.4, 1.0, 3.0, 0.98, 56.85],
    [85.0, 13.2, 24.2, 3.0, 2.0, 1.30, 56.68],
    [71.0, 18.0, 25.0, 1.0, 2.0, 0.82, 58.45],
    [43.0, 18.0, 22.6, 3.0, 3.0, 1.14, 55.50],
    [15.0, 16.8, 24.2, 2.0, 3.0, 0.50, 52.77],
    [43.0, 13.2, 22.6, 1.0, 1.0, 0.50, 57.36],
    [57.0, 15.6, 23.4, 3.0, 1.0, 0.66, 59.64],
];

/// The 12-run piston slap noise experiment: cylinder liner, location of peak
/// pressure, skirt length, skirt profile, skirt ovality and pin offset, with
/// noise in dB.
pub fn piston_slap_table() -> RawTable {
    RawTable {
        inputs: DMatrix::from_fn(12, 6, |i, p| PISTON_SLAP[i][p]),
        responses: PISTON_SLAP.iter().map(|r| r[6]).collect(),
    }
}

/// Piston slap data scaled by the observed per-column range.
pub fn piston_slap_dataset() -> (RawTable, Dataset) {
    let table = piston_slap_table();
    let data = Dataset::from_raw_observed(&table.inputs, &table.responses)
        .expect("embedded piston slap table is a valid design");
    (table, data)
}
