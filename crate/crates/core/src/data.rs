//! Synthetic multimodal datasets, leave-one-out splits, out-of-distribution
//! sets, IDX ingestion and CSV import/export.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusteredDataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    #[default]
    GaussianMixture,
    /// Noisy spheres: radius `ring_radius` around each center, radial noise `scale`.
    Rings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub center: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub components: Vec<Component>,
    #[serde(default)]
    pub ring_radius: f64,
    pub seed: u64,
}

impl DistributionSpec {
    /// Three isotropic Gaussians at (0,0), (8,0), (0,8), scale 0.7, equal weights.
    pub fn tri_gauss(seed: u64) -> Self {
        let comp = |x: f64, y: f64| Component {
            center: vec![x, y],
            scale: 0.7,
            weight: 1.0 / 3.0,
        };
        DistributionSpec {
            kind: DistributionKind::GaussianMixture,
            components: vec![comp(0.0, 0.0), comp(8.0, 0.0), comp(0.0, 8.0)],
            ring_radius: 0.0,
            seed,
        }
    }

    /// Number of reference samples used with [`DistributionSpec::tri_gauss`].
    pub const TRI_GAUSS_N: usize = 3000;

    pub fn dim(&self) -> usize {
        self.components.first().map(|c| c.center.len()).unwrap_or(0)
    }

    pub fn max_scale(&self) -> f64 {
        self.components.iter().map(|c| c.scale).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::config("distribution needs at least one component"));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::config("component centers must be nonempty"));
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.center.len() != d {
                return Err(Error::config(format!(
                    "component {i} center has dimension {}",
                    c.center.len()
                )));
            }
            if c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("component {i} center is not finite")));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::config(format!("component {i} scale must be positive")));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::config(format!("component {i} weight must be non-negative")));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("component weights sum to {total}, not 1")));
        }
        if self.kind == DistributionKind::Rings && !(self.ring_radius > 0.0) {
            return Err(Error::config("rings need a positive ring_radius"));
        }
        Ok(())
    }

    /// Whether every pair of component supports is separated by at least
    /// six times the largest scale (for rings, after subtracting the radii).
    pub fn is_disjoint(&self) -> bool {
        let gap = 6.0 * self.max_scale();
        let extent = if self.kind == DistributionKind::Rings {
            2.0 * self.ring_radius
        } else {
            0.0
        };
        self.components.iter().enumerate().all(|(i, a)| {
            self.components[i + 1..].iter().all(|b| {
                let d = a
                    .center
                    .iter()
                    .zip(&b.center)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                d - extent >= gap
            })
        })
    }
}

/// Per-component counts by largest remainder, each nonempty component getting at least one row.
fn component_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let left = n - counts.iter().sum::<usize>();
    for &i in rest.iter().cycle().take(left) {
        counts[i] += 1;
    }
    // guarantee presence of every positive-weight component
    for i in 0..counts.len() {
        if counts[i] == 0 && weights[i] > 0.0 {
            if let Some(j) = (0..counts.len()).max_by_key(|&j| counts[j]) {
                if counts[j] > 1 {
                    counts[j] -= 1;
                    counts[i] += 1;
                }
            }
        }
    }
    counts
}

/// Draws `n` labelled samples; label = component index. Rows are shuffled.
pub fn generate(spec: &DistributionSpec, n: usize) -> Result<ClusteredDataset> {
    spec.validate()?;
    let k = spec.components.len();
    if n < k {
        return Err(Error::config(format!(
            "need at least {k} samples for {k} components, got {n}"
        )));
    }
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let counts = component_counts(&weights, n);
    let mut rng = seed::rng(spec.seed);
    let d = spec.dim();
    let mut rows = Vec::with_capacity(n);
    for (label, (c, &count)) in spec.components.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let point = match spec.kind {
                DistributionKind::GaussianMixture => c.center.iter().zip(&g).map(|(m, e)| m + c.scale * e).collect(),
                DistributionKind::Rings => {
                    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                    let r = spec.ring_radius + c.scale * rng.sample::<f64, _>(StandardNormal);
                    c.center.iter().zip(&g).map(|(m, e)| m + r * e / norm).collect()
                }
            };
            rows.push((point, label));
        }
    }
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
    let (points, labels) = rows.into_iter().unzip();
    ClusteredDataset::new(points, labels)
}

/// Removes class `k`: returns the remaining classes (re-indexed densely, order
/// preserved) and the removed class's points.
pub fn leave_one_out(ds: &ClusteredDataset, k: usize) -> Result<(ClusteredDataset, Vec<Vec<f64>>)> {
    if ds.n_classes() < 2 {
        return Err(Error::input("leave-one-out needs at least two classes"));
    }
    if k >= ds.n_classes() {
        return Err(Error::input(format!(
            "class {k} does not exist ({} classes)",
            ds.n_classes()
        )));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut anomaly = Vec::new();
    for (x, &l) in ds.points().iter().zip(ds.labels()) {
        if l == k {
            anomaly.push(x.clone());
        } else {
            points.push(x.clone());
            labels.push(if l > k { l - 1 } else { l });
        }
    }
    Ok((ClusteredDataset::new(points, labels)?, anomaly))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum OodMode {
    /// Translate every row by `magnitude` along one seeded random unit direction.
    Shift { magnitude: f64 },
    /// `n` uniform draws over the data's bounding box inflated by `margin` on every side.
    UniformBox { margin: f64, n: usize },
}

/// Builds an out-of-distribution point set from `points`.
pub fn make_ood(points: &[Vec<f64>], mode: OodMode, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = points
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::input("empty reference data"))?;
    let mut rng = seed::rng(seed);
    match mode {
        OodMode::Shift { magnitude } => {
            if !(magnitude >= 0.0) {
                return Err(Error::input("shift magnitude must be non-negative"));
            }
            let dir = random_direction(&mut rng, d);
            Ok(points
                .iter()
                .map(|p| p.iter().zip(&dir).map(|(x, u)| x + magnitude * u).collect())
                .collect())
        }
        OodMode::UniformBox { margin, n } => {
            let (lo, hi) = bounding_box(points);
            Ok((0..n)
                .map(|_| {
                    (0..d)
                        .map(|j| rng.random_range((lo[j] - margin)..=(hi[j] + margin)))
                        .collect()
                })
                .collect())
        }
    }
}

pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Per-coordinate minimum and maximum.
pub fn bounding_box(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for j in 0..d {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
        }
    }
    (lo, hi)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(Some(offset as u64), "unexpected end of file"))
}

/// Parses an unsigned-byte IDX image file into flattened rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(Some(0), format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let needed = 16 + n * size;
    if bytes.len() < needed {
        return Err(Error::format(
            Some(bytes.len() as u64),
            format!("truncated image data: expected {needed} bytes"),
        ));
    }
    Ok(bytes[16..needed]
        .chunks(size.max(1))
        .take(n)
        .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
        .collect())
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(Some(0), format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(
            Some(bytes.len() as u64),
            format!("truncated label data: expected {} bytes", 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Loads paired IDX image and label files. Distinct label values are mapped
/// to dense class indices in ascending order.
pub fn load_idx(images: &Path, labels: &Path) -> Result<ClusteredDataset> {
    let img = parse_idx_images(&read_file(images)?)?;
    let lab = parse_idx_labels(&read_file(labels)?)?;
    if img.len() != lab.len() {
        return Err(Error::format(
            Some(4),
            format!("{} images but {} labels", img.len(), lab.len()),
        ));
    }
    let mut distinct: Vec<u8> = lab.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels = lab
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    ClusteredDataset::new(img, labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

/// Formats a float with 9 significant digits.
pub fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte());
    Error::format(offset, e.to_string())
}

/// Writes `label,x0,...,x{d-1}` rows.
pub fn write_dataset_csv<W: Write>(w: W, ds: &ClusteredDataset) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    out.write_record(&header).map_err(csv_err)?;
    for (p, l) in ds.points().iter().zip(ds.labels()) {
        let mut rec = vec![l.to_string()];
        rec.extend(p.iter().map(|v| fmt9(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `x0,...,x{d-1}` rows.
pub fn write_points_csv<W: Write>(w: W, points: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    out.write_record((0..d).map(|j| format!("x{j}"))).map_err(csv_err)?;
    for p in points {
        out.write_record(p.iter().map(|v| fmt9(*v))).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Point rows plus optional class labels.
pub type LabeledPoints = (Vec<Vec<f64>>, Option<Vec<usize>>);

/// Reads a CSV with a header row. Columns named `x<j>` are coordinates; an
/// optional `label` column is returned alongside.
pub fn read_csv<R: Read>(r: R) -> Result<LabeledPoints> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let coord_cols: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != label_col).collect();
    if coord_cols.is_empty() {
        return Err(Error::format(Some(0), "no coordinate columns"));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.byte());
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(line, format!("bad value in column {}", headers.get(i).unwrap_or("?"))))
        };
        points.push(coord_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<f64>>>()?);
        if let Some(lc) = label_col {
            let l = rec
                .get(lc)
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::format(line, "bad label"))?;
            labels.push(l);
        }
    }
    Ok((points, label_col.map(|_| labels)))
}

pub fn read_csv_file(path: &Path) -> Result<LabeledPoints> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(f))
}
