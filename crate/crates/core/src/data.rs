//! Synthetic 2D benchmarks, evaluation grids and their text formats.
//!
//! Dataset CSV: optional `# key=value` metadata lines, then the header
//! `x1,x2,label`; OOD rows carry label `-1`. Surface CSV has the header
//! `x1,x2,value`. Floats are written in shortest round-trip form, so reading
//! a written file reproduces every value bit for bit.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, RngState};

pub const DATASET_FORMAT: &str = "sngp-dataset/1";
pub const SURFACE_FORMAT: &str = "sngp-surface/1";

/// Class centers of the two ovals: `(±OVAL_CENTER_X, 0)`.
pub const OVAL_CENTER_X: f64 = 1.25;
/// Per-axis standard deviations of each oval (wide in x, thin in y).
pub const OVAL_SD: [f64; 2] = [0.5, 0.1];
pub const DEFAULT_MOONS_NOISE: f64 = 0.1;

/// An isotropic Gaussian cluster of out-of-domain points kept at least
/// `margin` away from every in-domain point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodCluster {
    pub center: [f64; 2],
    pub sd: f64,
    pub n: usize,
    pub margin: f64,
}

impl OodCluster {
    /// Above and between the two ovals.
    pub fn ovals_default(n: usize) -> Self {
        Self {
            center: [0.0, 2.0],
            sd: 0.2,
            n,
            margin: 0.5,
        }
    }

    /// Below and to the right of the lower moon.
    pub fn moons_default(n: usize) -> Self {
        Self {
            center: [2.5, -1.75],
            sd: 0.1,
            n,
            margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset2D {
    pub points: Matrix,
    pub labels: Vec<usize>,
    pub ood_points: Option<Matrix>,
    pub name: String,
    pub seed: u64,
}

impl Dataset2D {
    pub fn new(
        points: Matrix,
        labels: Vec<usize>,
        ood_points: Option<Matrix>,
        name: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        crate::error::check_dim("Dataset2D columns", 2, points.cols())?;
        crate::error::check_dim("Dataset2D labels", points.rows(), labels.len())?;
        if let Some(o) = &ood_points {
            crate::error::check_dim("Dataset2D OOD columns", 2, o.cols())?;
            if !o.is_finite() {
                return Err(Error::InvalidArgument("non-finite OOD coordinate".into()));
            }
        }
        if !points.is_finite() {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(Self {
            points,
            labels,
            ood_points,
            name: name.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn num_ood(&self) -> usize {
        self.ood_points.as_ref().map_or(0, Matrix::rows)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# format={DATASET_FORMAT}")?;
        writeln!(out, "# name={}", self.name)?;
        writeln!(out, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x1", "x2", "label"]).map_err(csv_err)?;
        for (p, y) in self.points.row_iter().zip(&self.labels) {
            w.write_record([p[0].to_string(), p[1].to_string(), y.to_string()])
                .map_err(csv_err)?;
        }
        if let Some(o) = &self.ood_points {
            for p in o.row_iter() {
                w.write_record([p[0].to_string(), p[1].to_string(), "-1".to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let (meta, rows) = read_table(input, ["x1", "x2", "label"])?;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut ood = Vec::new();
        for (line, rec) in rows {
            let x1 = parse_f64(&rec[0], line)?;
            let x2 = parse_f64(&rec[1], line)?;
            let label: i64 = rec[2].trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad label `{}`", &rec[2]),
            })?;
            match label {
                -1 => ood.extend([x1, x2]),
                l if l >= 0 => {
                    points.extend([x1, x2]);
                    labels.push(l as usize);
                }
                l => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label {l} is neither a class id nor -1"),
                    })
                }
            }
        }
        let name = meta_value(&meta, "name").unwrap_or_default();
        let seed = meta_value(&meta, "seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let n = labels.len();
        let ood_points = if ood.is_empty() {
            None
        } else {
            Some(Matrix::from_vec(ood.len() / 2, 2, ood)?)
        };
        Self::new(Matrix::from_vec(n, 2, points)?, labels, ood_points, name, seed)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad number `{s}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("non-finite value `{s}`"),
        });
    }
    Ok(v)
}

fn meta_value(meta: &[(String, String)], key: &str) -> Option<String> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
}

type Rows = Vec<(usize, csv::StringRecord)>;

/// Reads leading `# key=value` lines, checks the header, and returns every
/// data record with its 1-based line number.
fn read_table<R: Read>(input: R, header: [&str; 3]) -> Result<(Vec<(String, String)>, Rows)> {
    let mut reader = BufReader::new(input);
    let mut meta = Vec::new();
    let mut consumed = 0usize;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse {
                line: consumed + 1,
                msg: "missing header".into(),
            });
        }
        consumed += 1;
        let Some(rest) = line.trim_end().strip_prefix('#') else {
            break;
        };
        if let Some((k, v)) = rest.trim().split_once('=') {
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let got: Vec<&str> = line.trim_end().split(',').map(str::trim).collect();
    if got != header {
        return Err(Error::Parse {
            line: consumed,
            msg: format!("expected header `{}`, got `{}`", header.join(","), line.trim_end()),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize) + consumed;
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line_no = rec.position().map_or(0, |p| p.line() as usize) + consumed;
        if rec.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, got {}", rec.len()),
            });
        }
        rows.push((line_no, rec));
    }
    Ok((meta, rows))
}

/// Samples `n` OOD points, rejecting any within `margin` of `ind`.
fn sample_ood(ood: &OodCluster, ind: &Matrix, rng: &mut RngState) -> Result<Matrix> {
    if !(ood.sd >= 0.0) || !(ood.margin >= 0.0) {
        return Err(Error::InvalidArgument("OOD sd and margin must be non-negative".into()));
    }
    let max_attempts = 1000 * ood.n.max(1);
    let mut out = Vec::with_capacity(2 * ood.n);
    let mut attempts = 0;
    while out.len() < 2 * ood.n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArgument(format!(
                "could not place OOD points {} away from the data",
                ood.margin
            )));
        }
        let p = [
            ood.center[0] + ood.sd * rng.normal(),
            ood.center[1] + ood.sd * rng.normal(),
        ];
        if distance_to_set(&p, ind) >= ood.margin {
            out.extend(p);
        }
    }
    Matrix::from_vec(ood.n, 2, out)
}

/// Euclidean distance from `x` to the nearest row of `set` (∞ if empty).
pub fn distance_to_set(x: &[f64], set: &Matrix) -> f64 {
    set.row_iter()
        .map(|r| linalg::distance(x, r))
        .fold(f64::INFINITY, f64::min)
}

pub fn gen_two_ovals(n_per_class: usize, seed: u64) -> Result<Dataset2D> {
    gen_two_ovals_with(n_per_class, &OodCluster::ovals_default(n_per_class), seed)
}

/// Two flat Gaussian clusters centered at `(±OVAL_CENTER_X, 0)`.
pub fn gen_two_ovals_with(n_per_class: usize, ood: &OodCluster, seed: u64) -> Result<Dataset2D> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be positive".into()));
    }
    let root = RngState::new(seed);
    let mut rng = root.derive("points");
    let mut pts = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for (class, sign) in [(0usize, -1.0), (1, 1.0)] {
        for _ in 0..n_per_class {
            pts.push(sign * OVAL_CENTER_X + OVAL_SD[0] * rng.normal());
            pts.push(OVAL_SD[1] * rng.normal());
            labels.push(class);
        }
    }
    let points = Matrix::from_vec(2 * n_per_class, 2, pts)?;
    let ood_points = sample_ood(ood, &points, &mut root.derive("ood"))?;
    Dataset2D::new(points, labels, Some(ood_points), "two_ovals", seed)
}

pub fn gen_two_moons(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset2D> {
    gen_two_moons_with(
        n_per_class,
        noise_sd,
        &OodCluster::moons_default(n_per_class),
        seed,
    )
}

/// Upper moon `(cos t, sin t)`, lower moon `(1 − cos t, 0.5 − sin t)`, with
/// `t` evenly spaced on `[0, π]`, plus isotropic noise.
pub fn gen_two_moons_with(
    n_per_class: usize,
    noise_sd: f64,
    ood: &OodCluster,
    seed: u64,
) -> Result<Dataset2D> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be positive".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::InvalidArgument("noise_sd must be non-negative".into()));
    }
    let root = RngState::new(seed);
    let mut rng = root.derive("points");
    let mut pts = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let denom = (n_per_class.max(2) - 1) as f64;
    for class in 0..2usize {
        for i in 0..n_per_class {
            let t = std::f64::consts::PI * i as f64 / denom;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            pts.push(x + noise_sd * rng.normal());
            pts.push(y + noise_sd * rng.normal());
            labels.push(class);
        }
    }
    let points = Matrix::from_vec(2 * n_per_class, 2, pts)?;
    let ood_points = sample_ood(ood, &points, &mut root.derive("ood"))?;
    Dataset2D::new(points, labels, Some(ood_points), "two_moons", seed)
}

/// Regular grid over a rectangle, points listed row by row (x varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl EvalGrid {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        if !(x_range.0 < x_range.1) || !(y_range.0 < y_range.1) {
            return Err(Error::InvalidArgument("grid bounds must satisfy lo < hi".into()));
        }
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
        }
        Ok(Self {
            x_range,
            y_range,
            nx,
            ny,
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn axis(range: (f64, f64), n: usize, i: usize) -> f64 {
        if i == n - 1 {
            range.1
        } else {
            range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
        }
    }

    pub fn points(&self) -> Matrix {
        let mut data = Vec::with_capacity(2 * self.len());
        for iy in 0..self.ny {
            let y = Self::axis(self.y_range, self.ny, iy);
            for ix in 0..self.nx {
                data.push(Self::axis(self.x_range, self.nx, ix));
                data.push(y);
            }
        }
        Matrix::from_vec(self.len(), 2, data).expect("sizes agree by construction")
    }
}

pub fn gen_grid(x_range: (f64, f64), y_range: (f64, f64), resolution: usize) -> Result<EvalGrid> {
    EvalGrid::new(x_range, y_range, resolution, resolution)
}

/// A scalar value for every point of an [`EvalGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub grid: EvalGrid,
    pub values: Vec<f64>,
    /// Extra `key=value` lines written before the CSV header.
    pub metadata: Vec<(String, String)>,
}

impl Surface {
    pub fn new(grid: EvalGrid, values: Vec<f64>, metadata: Vec<(String, String)>) -> Result<Self> {
        crate::error::check_dim("Surface values", grid.len(), values.len())?;
        Ok(Self {
            grid,
            values,
            metadata,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        writeln!(out, "# format={SURFACE_FORMAT}")?;
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}={v}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x1", "x2", "value"]).map_err(csv_err)?;
        for (p, v) in self.grid.points().row_iter().zip(&self.values) {
            w.write_record([p[0].to_string(), p[1].to_string(), v.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `(x1, x2, value)` rows; the grid is not reconstructed.
    pub fn read_csv_rows<R: Read>(input: R) -> Result<Vec<[f64; 3]>> {
        let (_, rows) = read_table(input, ["x1", "x2", "value"])?;
        rows.iter()
            .map(|(line, r)| {
                Ok([
                    parse_f64(&r[0], *line)?,
                    parse_f64(&r[1], *line)?,
                    parse_f64(&r[2], *line)?,
                ])
            })
            .collect()
    }

    /// Plain PGM (P2): one pixel per grid point, top row = largest y, values
    /// mapped linearly from [min, max] to 0–255.
    pub fn write_pgm<W: Write>(&self, out: W) -> Result<()> {
        let mut out = out;
        let (lo, hi) = self
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = hi - lo;
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.grid.nx, self.grid.ny)?;
        writeln!(out, "255")?;
        for iy in (0..self.grid.ny).rev() {
            let row: Vec<String> = self.values[iy * self.grid.nx..(iy + 1) * self.grid.nx]
                .iter()
                .map(|&v| {
                    let level = if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 };
                    (level.round() as u8).to_string()
                })
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ovals_counts_and_symmetry() {
        let d = gen_two_ovals(500, 3).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.labels.iter().filter(|&&y| y == 0).count(), 500);
        assert_eq!(d, gen_two_ovals(500, 3).unwrap());
        assert_ne!(d, gen_two_ovals(500, 4).unwrap());
        let mean_x = |c: usize| {
            let xs: Vec<f64> = d
                .points
                .row_iter()
                .zip(&d.labels)
                .filter(|(_, &y)| y == c)
                .map(|(p, _)| p[0])
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean_x(0) < -1.0 && mean_x(1) > 1.0);
        assert!((mean_x(0) + mean_x(1)).abs() < 0.15);
    }

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let d = gen_two_moons(50, 0.0, 1).unwrap();
        for (p, &y) in d.points.row_iter().zip(&d.labels) {
            let r = if y == 0 {
                (p[0].powi(2) + p[1].powi(2)).sqrt()
            } else {
                ((p[0] - 1.0).powi(2) + (p[1] - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() <= 1e-12);
            if y == 0 {
                assert!(p[1] >= -1e-12);
            } else {
                assert!(p[1] <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn moons_inside_envelope() {
        let sd = 0.1;
        let d = gen_two_moons(500, sd, 7).unwrap();
        assert_eq!(d.len(), 1000);
        // noise-free extent x ∈ [−1, 2], y ∈ [−0.5, 1]; 6σ is beyond any of 2000 draws
        for p in d.points.row_iter() {
            assert!(p[0] >= -1.0 - 6.0 * sd && p[0] <= 2.0 + 6.0 * sd);
            assert!(p[1] >= -0.5 - 6.0 * sd && p[1] <= 1.0 + 6.0 * sd);
        }
    }

    #[test]
    fn ood_respects_margin() {
        for d in [gen_two_moons(200, 0.1, 2).unwrap(), gen_two_ovals(200, 2).unwrap()] {
            let ood = d.ood_points.as_ref().unwrap();
            assert_eq!(ood.rows(), 200);
            for p in ood.row_iter() {
                assert!(distance_to_set(p, &d.points) >= 0.5);
            }
        }
    }

    #[test]
    fn impossible_margin_is_an_error() {
        let ood = OodCluster {
            center: [0.0, 0.0],
            sd: 0.0,
            n: 3,
            margin: 10.0,
        };
        assert!(gen_two_moons_with(10, 0.1, &ood, 0).is_err());
    }

    #[test]
    fn grid_corners_and_order() {
        let g = gen_grid((0.0, 1.0), (0.0, 1.0), 2).unwrap();
        let p = g.points();
        assert_eq!(
            p.as_slice(),
            &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        let g = gen_grid((-3.0, 3.0), (-2.0, 2.0), 100).unwrap();
        let p = g.points();
        assert_eq!(p.rows(), 10_000);
        assert_eq!(p.row(1)[1], -2.0);
        assert_eq!(p.row(100)[0], -3.0);
        assert_eq!(p.row(9999), &[3.0, 2.0]);
        assert!(gen_grid((1.0, 0.0), (0.0, 1.0), 5).is_err());
        assert!(gen_grid((0.0, 1.0), (0.0, 1.0), 1).is_err());
    }

    #[test]
    fn dataset_csv_round_trip_is_bit_exact() {
        let d = gen_two_moons(40, 0.1, 9).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset2D::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().any(|l| l == "x1,x2,label"));
        assert_eq!(text.lines().filter(|l| l.ends_with(",-1")).count(), 40);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "# name=x\nx1,x2,label\n0.5,1.0,0\n0.1,oops,1\n";
        match Dataset2D::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let text = "x1,x2,label\n0.5,1.0\n";
        match Dataset2D::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Dataset2D::read_csv("a,b,c\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn surface_csv_and_pgm() {
        let g = gen_grid((0.0, 1.0), (0.0, 2.0), 3).unwrap();
        let s = Surface::new(g, (0..9).map(f64::from).collect(), vec![("metric".into(), "x".into())])
            .unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let rows = Surface::read_csv_rows(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 9);
        assert_eq!(rows[4], [0.5, 1.0, 4.0]);
        let mut pgm = Vec::new();
        s.write_pgm(&mut pgm).unwrap();
        let text = String::from_utf8(pgm).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[..3], ["P2", "3 3", "255"]);
        assert_eq!(lines[3], "191 223 255");
        assert_eq!(lines[5], "0 32 64");
    }
}
