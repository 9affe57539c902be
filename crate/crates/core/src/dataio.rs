//! Mesh samples: the `TPP1` binary format, a synthetic ellipsoid dataset,
//! JSON manifests, and per-channel normalisation.
//!
//! `TPP1` layout (all little-endian):
//!
//! | offset | field                                   |
//! |--------|-----------------------------------------|
//! | 0      | magic `b"TPP1"`                          |
//! | 4      | u32 `n`                                  |
//! | 8      | u32 `d_coords` (always 3)                |
//! | 12     | u32 `has_normals` (0/1)                  |
//! | 16     | u32 `d_extra`                            |
//! | 20     | u32 `d_out`                              |
//! | 24     | u32 `has_areas` (0/1)                    |
//! | 28     | f64 arrays: coords `n*3`, normals `n*3` (if present), extra `n*d_extra`, targets `n*d_out`, areas `n` (if present) |

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"TPP1";
const HEADER_LEN: usize = 28;

#[derive(Clone, Debug, PartialEq)]
pub struct MeshSample {
    /// `[N, 3]`.
    pub coords: Tensor<f64>,
    /// `[N, 3]` unit vectors.
    pub normals: Option<Tensor<f64>>,
    /// `[N, d_extra]`.
    pub extra: Option<Tensor<f64>>,
    /// `[N, d_out]`.
    pub targets: Tensor<f64>,
    /// `[N]` strictly positive.
    pub areas: Option<Tensor<f64>>,
}

impl MeshSample {
    pub fn n(&self) -> usize {
        self.coords.rows()
    }

    pub fn d_extra(&self) -> usize {
        self.extra.as_ref().map_or(0, Tensor::cols)
    }

    pub fn d_out(&self) -> usize {
        self.targets.cols()
    }

    /// Input width: coords, then normals, then extra channels.
    pub fn d_in(&self) -> usize {
        3 + if self.normals.is_some() { 3 } else { 0 } + self.d_extra()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.rows();
        let check = |name: &str, t: &Tensor<f64>, cols: Option<usize>| -> Result<()> {
            if t.rows() != n || cols.is_some_and(|c| t.cols() != c) {
                return Err(Error::Validation(format!("{name} has shape {:?}, expected {n} rows", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        check("coords", &self.coords, Some(3))?;
        check("targets", &self.targets, None)?;
        if let Some(nrm) = &self.normals {
            check("normals", nrm, Some(3))?;
            for i in 0..n {
                let len = nrm.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (len - 1.0).abs() > 1e-6 {
                    return Err(Error::Validation(format!("normal {i} has length {len}")));
                }
            }
        }
        if let Some(e) = &self.extra {
            check("extra", e, None)?;
        }
        if let Some(a) = &self.areas {
            check("areas", a, None)?;
            if a.numel() != n {
                return Err(Error::Validation("areas must hold one value per point".into()));
            }
            if let Some(bad) = a.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Validation(format!("area {bad} is not strictly positive")));
            }
        }
        Ok(())
    }

    /// `[N, d_in]` model input: coords, normals, extra.
    pub fn features(&self) -> Tensor<f64> {
        let n = self.n();
        let d = self.d_in();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend_from_slice(self.coords.row(i));
            if let Some(nrm) = &self.normals {
                data.extend_from_slice(nrm.row(i));
            }
            if let Some(e) = &self.extra {
                data.extend_from_slice(e.row(i));
            }
        }
        Tensor::new(vec![n, d], data).expect("feature shape")
    }

    /// Same sample with points reordered: new point `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let p = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
            if t.shape().len() == 1 {
                let v: Vec<f64> = perm.iter().map(|&i| t.data()[i]).collect();
                Tensor::new(vec![v.len()], v)
            } else {
                t.permute_rows(perm)
            }
        };
        Ok(Self {
            coords: p(&self.coords)?,
            normals: self.normals.as_ref().map(p).transpose()?,
            extra: self.extra.as_ref().map(p).transpose()?,
            targets: p(&self.targets)?,
            areas: self.areas.as_ref().map(p).transpose()?,
        })
    }
}

pub fn encode_sample(sample: &MeshSample) -> Result<Vec<u8>> {
    if sample.n() == 0 {
        return Err(Error::Validation("sample has no points".into()));
    }
    sample.validate()?;
    let n = sample.n();
    let header = [
        n as u32,
        3,
        u32::from(sample.normals.is_some()),
        sample.d_extra() as u32,
        sample.d_out() as u32,
        u32::from(sample.areas.is_some()),
    ];
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n * (3 + 3 + sample.d_extra() + sample.d_out() + 1));
    buf.extend_from_slice(SAMPLE_MAGIC);
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    let mut put = |t: &Tensor<f64>| {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&sample.coords);
    if let Some(t) = &sample.normals {
        put(t);
    }
    if let Some(t) = &sample.extra {
        put(t);
    }
    put(&sample.targets);
    if let Some(t) = &sample.areas {
        put(t);
    }
    Ok(buf)
}

/// Little-endian reader that reports the byte offset of every failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: {what} needs {len} bytes, {} remain", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(count.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            msg: format!("{what} length overflows"),
        })?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn flag(v: u32, what: &str, offset: u64) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format { offset, msg: format!("{what} flag must be 0 or 1, got {v}") }),
    }
}

/// Decodes a `TPP1` buffer. Allocation is bounded by the buffer length:
/// every array is checked against the remaining bytes before it is read.
pub fn decode_sample(buf: &[u8]) -> Result<MeshSample> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != SAMPLE_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected TPP1".into() });
    }
    let n = r.u32("n")? as usize;
    let off = r.offset();
    let d_coords = r.u32("d_coords")?;
    if d_coords != 3 {
        return Err(Error::Format { offset: off, msg: format!("d_coords must be 3, got {d_coords}") });
    }
    let off = r.offset();
    let has_normals = flag(r.u32("has_normals")?, "has_normals", off)?;
    let d_extra = r.u32("d_extra")? as usize;
    let d_out = r.u32("d_out")? as usize;
    let off = r.offset();
    let has_areas = flag(r.u32("has_areas")?, "has_areas", off)?;
    if n == 0 {
        return Err(Error::Validation("sample has no points".into()));
    }
    if d_out == 0 {
        return Err(Error::Validation("sample has no target channels".into()));
    }
    let coords = Tensor::new(vec![n, 3], r.f64s(n * 3, "coords")?)?;
    let normals = if has_normals { Some(Tensor::new(vec![n, 3], r.f64s(n * 3, "normals")?)?) } else { None };
    let extra = if d_extra > 0 { Some(Tensor::new(vec![n, d_extra], r.f64s(n * d_extra, "extra")?)?) } else { None };
    let targets = Tensor::new(vec![n, d_out], r.f64s(n * d_out, "targets")?)?;
    let areas = if has_areas { Some(Tensor::new(vec![n], r.f64s(n, "areas")?)?) } else { None };
    r.finish()?;
    let sample = MeshSample { coords, normals, extra, targets, areas };
    sample.validate()?;
    Ok(sample)
}

pub fn write_sample(path: &Path, sample: &MeshSample) -> Result<()> {
    fs::write(path, encode_sample(sample)?)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<MeshSample> {
    decode_sample(&fs::read(path)?)
}

/// `n` near-uniform points on the unit sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let p = [r * phi.cos(), r * phi.sin(), z];
            let len = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / len, p[1] / len, p[2] / len]
        })
        .collect()
}

/// Free-stream direction of the synthetic flow.
pub const FLOW_DIR: [f64; 3] = [1.0, 0.0, 0.0];

/// Synthetic surface pressure at a point with outward normal `n` and
/// height `z`:
///
/// `p = 1 - 2.25 (1 - c^2) - 0.3 c + 0.1 z`, with `c = n . FLOW_DIR`.
///
/// The first two terms are the potential-flow pressure coefficient of a
/// sphere (stagnation `p = 1` where the normal faces upstream, `c = -1`);
/// `-0.3 c` raises windward over leeward pressure, giving a net drag and,
/// on tilted bodies, a lift; `0.1 z` adds a position-dependent gradient.
pub fn synthetic_pressure(normal: [f64; 3], z: f64) -> f64 {
    let c = normal[0] * FLOW_DIR[0] + normal[1] * FLOW_DIR[1] + normal[2] * FLOW_DIR[2];
    1.0 - 2.25 * (1.0 - c * c) - 0.3 * c + 0.1 * z
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos(), b * (2.0 * PI * u3).sin(), b * (2.0 * PI * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Ellipsoid geometry: semi-axes and rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub axes: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl Ellipsoid {
    /// Surface points, exact outward normals and per-point areas for the
    /// Fibonacci sampling of the unit sphere mapped through
    /// `x = R diag(axes) u`. The sphere area element `4 pi / n` is scaled by
    /// the surface Jacobian `abc * |diag(axes)^-1 u|`.
    pub fn sample_surface(&self, n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<f64>) {
        let [a, b, c] = self.axes;
        let mut pts = Vec::with_capacity(n);
        let mut nrm = Vec::with_capacity(n);
        let mut area = Vec::with_capacity(n);
        for u in fibonacci_sphere(n) {
            pts.push(rotate(&self.rotation, [a * u[0], b * u[1], c * u[2]]));
            let g = [u[0] / a, u[1] / b, u[2] / c];
            let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            nrm.push(rotate(&self.rotation, [g[0] / len, g[1] / len, g[2] / len]));
            area.push(4.0 * PI / n as f64 * a * b * c * len);
        }
        (pts, nrm, area)
    }
}

/// Randomly scaled and rotated ellipsoids carrying [`synthetic_pressure`]
/// as the single target channel. Inputs are coords and normals (`d_in = 6`).
pub fn gen_sphere_dataset(count: usize, n_points: usize, seed: u64) -> Result<Vec<MeshSample>> {
    if n_points < 10 {
        return Err(Error::Validation(format!("n_points must be >= 10, got {n_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let axes = [rng.gen_range(0.6..1.4), rng.gen_range(0.6..1.4), rng.gen_range(0.6..1.4)];
            let body = Ellipsoid { axes, rotation: random_rotation(&mut rng) };
            let (pts, nrm, area) = body.sample_surface(n_points);
            let targets: Vec<f64> = pts.iter().zip(&nrm).map(|(p, n)| synthetic_pressure(*n, p[2])).collect();
            let sample = MeshSample {
                coords: Tensor::new(vec![n_points, 3], pts.concat())?,
                normals: Some(Tensor::new(vec![n_points, 3], nrm.concat())?),
                extra: None,
                targets: Tensor::new(vec![n_points, 1], targets)?,
                areas: Some(Tensor::new(vec![n_points], area)?),
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Per-channel affine normalisation statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl ChannelStats {
    /// Mean and population standard deviation (floored at `1e-8`) over the
    /// rows of all tensors.
    pub fn fit<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<Self> {
        let tensors: Vec<&Tensor<f64>> = tensors.into_iter().collect();
        let c = tensors.first().ok_or_else(|| Error::Validation("no data to fit statistics".into()))?.cols();
        let mut count = 0usize;
        let mut mean = vec![0.0; c];
        for t in &tensors {
            if t.cols() != c {
                return Err(Error::Validation("channel widths differ across samples".into()));
            }
            for i in 0..t.rows() {
                for (m, v) in mean.iter_mut().zip(t.row(i)) {
                    *m += v;
                }
            }
            count += t.rows();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; c];
        for t in &tensors {
            for i in 0..t.rows() {
                for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, t: &Tensor<f64>) -> Tensor<f64> {
        let c = self.mean.len();
        Tensor::from_fn(t.shape(), |k| (t.data()[k] - self.mean[k % c]) / self.std[k % c])
    }

    pub fn denormalize(&self, t: &Tensor<f64>) -> Tensor<f64> {
        let c = self.mean.len();
        Tensor::from_fn(t.shape(), |k| t.data()[k] * self.std[k % c] + self.mean[k % c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: ChannelStats,
    pub output: ChannelStats,
}

impl NormStats {
    /// Statistics of a training split.
    pub fn fit(train: &[MeshSample]) -> Result<Self> {
        let feats: Vec<Tensor<f64>> = train.iter().map(MeshSample::features).collect();
        Ok(Self {
            input: ChannelStats::fit(&feats)?,
            output: ChannelStats::fit(train.iter().map(|s| &s.targets))?,
        })
    }
}

/// Normalised model inputs and targets of one sample.
#[derive(Clone, Debug)]
pub struct NormalizedSample {
    pub features: Tensor<f64>,
    pub targets: Tensor<f64>,
}

pub fn normalize(stats: &NormStats, samples: &[MeshSample]) -> Vec<NormalizedSample> {
    samples
        .iter()
        .map(|s| NormalizedSample {
            features: stats.input.normalize(&s.features()),
            targets: stats.output.normalize(&s.targets),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// JSON dataset manifest.
///
/// Keys: `config_version` (1), `split` (`"train"`/`"test"`), `samples`
/// (paths, relative to the manifest's directory unless absolute),
/// `input_channels`, `output_channels` (names), `stats` (`input`/`output`,
/// each with `mean` and `std`, fitted on the training split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_version: u32,
    pub split: Split,
    pub samples: Vec<PathBuf>,
    pub input_channels: Vec<String>,
    pub output_channels: Vec<String>,
    pub stats: NormStats,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.config_version != 1 {
            return Err(Error::Validation(format!("unsupported manifest version {}", m.config_version)));
        }
        Ok(m)
    }

    /// Reads every listed sample and checks channel widths against the
    /// declared channels.
    pub fn load_samples(&self, manifest_path: &Path) -> Result<Vec<MeshSample>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.samples
            .iter()
            .map(|p| {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let s = read_sample(&path)?;
                if s.d_in() != self.input_channels.len() || s.d_out() != self.output_channels.len() {
                    return Err(Error::Validation(format!(
                        "{} has {} inputs / {} outputs, manifest declares {} / {}",
                        path.display(),
                        s.d_in(),
                        s.d_out(),
                        self.input_channels.len(),
                        self.output_channels.len()
                    )));
                }
                Ok(s)
            })
            .collect()
    }
}

/// Channel names of the synthetic ellipsoid dataset.
pub fn sphere_channels() -> (Vec<String>, Vec<String>) {
    let inputs = ["x", "y", "z", "nx", "ny", "nz"].map(String::from).to_vec();
    (inputs, vec!["pressure".to_string()])
}

/// Writes a train/test split under `dir`: `train/sample_XXXX.tpp1`,
/// `test/...`, and `train.json` / `test.json` manifests.
pub fn write_dataset(dir: &Path, train: &[MeshSample], test: &[MeshSample]) -> Result<(PathBuf, PathBuf)> {
    let stats = NormStats::fit(train)?;
    let (inputs, outputs) = sphere_channels();
    let mut paths = Vec::new();
    for (split, name, samples) in [(Split::Train, "train", train), (Split::Test, "test", test)] {
        fs::create_dir_all(dir.join(name))?;
        let mut files = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let rel = PathBuf::from(name).join(format!("sample_{i:04}.tpp1"));
            write_sample(&dir.join(&rel), s)?;
            files.push(rel);
        }
        let manifest = DatasetManifest {
            config_version: 1,
            split,
            samples: files,
            input_channels: inputs.clone(),
            output_channels: outputs.clone(),
            stats: stats.clone(),
        };
        let path = dir.join(format!("{name}.json"));
        manifest.save(&path)?;
        paths.push(path);
    }
    Ok((paths[0].clone(), paths[1].clone()))
}
