//! Versioned JSON containers, content-hashed dataset manifests and 1D
//! profile export.
//!
//! Every file is `{"format_version", "kind", "body"}` pretty-printed with a
//! trailing newline, so reading and rewriting a file reproduces its bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarsen::CoarseMap;
use crate::complex::ChainComplex;
use crate::error::{Error, Result};
use crate::model::{State, SurrogateModel};
use crate::reference::{CaseSpec, Dataset};
use crate::solve::SolveReport;
use crate::train::Sample;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format_version: u32,
    kind: String,
    body: T,
}

/// What a container holds.
pub trait Kind: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

impl Kind for ChainComplex {
    const KIND: &'static str = "complex";
}

impl Kind for SurrogateModel {
    const KIND: &'static str = "model";
}

/// Coarsening of `fine` onto `coarse`, both referenced by hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub fine_sha256: String,
    pub coarse_sha256: String,
    pub map: CoarseMap,
}

impl Kind for MapFile {
    const KIND: &'static str = "coarse_map";
}

/// One training or evaluation problem on the complex with the given hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFile {
    pub complex_sha256: String,
    pub alpha: f64,
    pub sample: Sample,
}

impl Kind for SampleFile {
    const KIND: &'static str = "sample";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub model_sha256: String,
    pub problem: String,
    pub state: State,
    pub report: SolveReport,
}

impl Kind for StateFile {
    const KIND: &'static str = "state";
}

/// A file path relative to the manifest, with the sha256 of its bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CaseSpec,
    pub fine: FileRef,
    pub coarse: FileRef,
    pub map: FileRef,
    pub samples: Vec<FileRef>,
}

impl Kind for Manifest {
    const KIND: &'static str = "manifest";
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_text<T: Kind>(value: &T) -> Result<String> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        kind: T::KIND.to_string(),
        body: value,
    };
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn from_text<T: Kind>(text: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
        kind: String,
    }
    let h: Header = serde_json::from_str(text)?;
    if h.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            h.format_version
        )));
    }
    if h.kind != T::KIND {
        return Err(Error::Format(format!("expected a {} file, found a {} file", T::KIND, h.kind)));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.body)
}

/// Writes a container and returns the sha256 of the bytes written.
pub fn write_file<T: Kind>(path: &Path, value: &T) -> Result<String> {
    let text = to_text(value)?;
    fs::write(path, &text).map_err(|e| io_context(e, path))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Reads a container together with the sha256 of its bytes.
pub fn read_file<T: Kind>(path: &Path) -> Result<(T, String)> {
    let text = fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    let value = from_text(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((value, sha256_hex(text.as_bytes())))
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Reads a model and checks its internal consistency.
pub fn read_model(path: &Path) -> Result<(SurrogateModel, String)> {
    let (mo, hash) = read_file::<SurrogateModel>(path)?;
    mo.check()?;
    Ok((mo, hash))
}

/// Reads a sample and checks that it refers to `complex_sha256` when given.
pub fn read_sample(path: &Path, complex_sha256: Option<&str>) -> Result<SampleFile> {
    let (s, _) = read_file::<SampleFile>(path)?;
    if let Some(h) = complex_sha256 {
        if s.complex_sha256 != h {
            return Err(Error::Incompatible(format!(
                "{} was generated for complex {}, not {h}",
                path.display(),
                s.complex_sha256
            )));
        }
    }
    Ok(s)
}

/// Writes `fine.json`, `coarse.json`, `map.json`, one file per sample under
/// `samples/` and the manifest into an existing directory.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )));
    }
    let fine = FileRef {
        path: "fine.json".into(),
        sha256: write_file(&dir.join("fine.json"), &ds.fine)?,
    };
    let coarse = FileRef {
        path: "coarse.json".into(),
        sha256: write_file(&dir.join("coarse.json"), &ds.coarse)?,
    };
    let map_file = MapFile {
        fine_sha256: fine.sha256.clone(),
        coarse_sha256: coarse.sha256.clone(),
        map: ds.map.clone(),
    };
    let map = FileRef {
        path: "map.json".into(),
        sha256: write_file(&dir.join("map.json"), &map_file)?,
    };
    fs::create_dir_all(dir.join("samples"))?;
    let samples = ds
        .samples
        .iter()
        .zip(&ds.spec.alphas)
        .map(|(s, &alpha)| {
            let path = format!("samples/{}.json", s.name);
            let file = SampleFile {
                complex_sha256: coarse.sha256.clone(),
                alpha,
                sample: s.clone(),
            };
            Ok(FileRef {
                sha256: write_file(&dir.join(&path), &file)?,
                path,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spec: ds.spec.clone(),
        fine,
        coarse,
        map,
        samples,
    };
    write_file(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// `path` itself when it is a file, else `path/manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

fn read_checked<T: Kind>(base: &Path, r: &FileRef) -> Result<T> {
    let (v, hash) = read_file(&base.join(&r.path))?;
    if hash != r.sha256 {
        return Err(Error::Incompatible(format!(
            "{} does not match its manifest hash",
            base.join(&r.path).display()
        )));
    }
    Ok(v)
}

/// Loads a dataset written by [`write_dataset`], checking every hash.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let base = mpath.parent().unwrap_or(Path::new("."));
    let (m, _) = read_file::<Manifest>(&mpath)?;
    let fine: ChainComplex = read_checked(base, &m.fine)?;
    let coarse: ChainComplex = read_checked(base, &m.coarse)?;
    let map: MapFile = read_checked(base, &m.map)?;
    if map.fine_sha256 != m.fine.sha256 || map.coarse_sha256 != m.coarse.sha256 {
        return Err(Error::Incompatible("coarse map refers to other complexes".into()));
    }
    let samples = m
        .samples
        .iter()
        .map(|r| {
            let s: SampleFile = read_checked(base, r)?;
            if s.complex_sha256 != m.coarse.sha256 {
                return Err(Error::Incompatible(format!("sample {} refers to another complex", r.path)));
            }
            Ok(s.sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: m.spec,
        fine,
        coarse,
        map: map.map,
        samples,
    })
}

/// Which field a profile shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    /// `u` divided by cell volume, on top cells.
    Potential,
    /// `w` on level `k - 1`.
    Flux,
    /// `d*_{k-1} u` on level `k - 1`.
    PrimalFlux,
}

impl std::str::FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "potential" => Ok(Self::Potential),
            "flux" => Ok(Self::Flux),
            "primal-flux" => Ok(Self::PrimalFlux),
            _ => Err(Error::InvalidArgument(format!("unknown quantity '{s}'"))),
        }
    }
}

impl Quantity {
    /// Cell averages for top-level problems, the nodal field otherwise.
    pub fn default_for(mo: &SurrogateModel) -> Self {
        if mo.k == mo.complex.dim() {
            Self::Potential
        } else {
            Self::PrimalFlux
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub value: f64,
}

/// Values of the entities nearest to the horizontal line at height `y`,
/// ordered by `x`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profile {
    pub rows: Vec<ProfileRow>,
}

impl Profile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,x,y,value\n");
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{:e}", r.index, r.x, r.y, r.value).expect("writing to a string");
        }
        out
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.value).collect()
    }
}

const LINE_SAMPLES: usize = 2048;

/// Entities whose point is nearest to some point of the line at height `y`
/// across the bounding box of `points`, in order of first appearance along
/// the line. Ties go to the lower index.
pub fn line_entities(points: &[[f64; 2]], y: f64) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let (x0, x1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    let mut out: Vec<usize> = Vec::new();
    for i in 0..=LINE_SAMPLES {
        let x = x0 + (x1 - x0) * i as f64 / LINE_SAMPLES as f64;
        let mut best = (f64::INFINITY, 0);
        for (j, p) in points.iter().enumerate() {
            let d = (p[0] - x).powi(2) + (p[1] - y).powi(2);
            if d < best.0 {
                best = (d, j);
            }
        }
        if !out.contains(&best.1) {
            out.push(best.1);
        }
    }
    out
}

/// Profile of `values` living on level `level` of `c`.
pub fn level_profile(c: &ChainComplex, level: usize, values: &[f64], y: f64) -> Result<Profile> {
    let points = if level == c.dim() {
        c.centroids()
    } else if level == 0 {
        c.positions()
    } else {
        return Err(Error::InvalidArgument(format!("no point locations for level {level}")));
    };
    if points.len() != values.len() {
        return Err(Error::InvalidArgument(format!("level {level} has no geometry to profile")));
    }
    let rows = line_entities(points, y)
        .into_iter()
        .map(|i| ProfileRow {
            index: i,
            x: points[i][0],
            y: points[i][1],
            value: values[i],
        })
        .collect();
    Ok(Profile { rows })
}

/// Profile of one field of a model state.
pub fn state_profile(mo: &SurrogateModel, s: &State, q: Quantity, y: f64) -> Result<Profile> {
    let c = &mo.complex;
    match q {
        Quantity::Potential => {
            let vol = c.volumes();
            if vol.len() != s.u.len() {
                return Err(Error::InvalidArgument("potential profiles need cell volumes on level k".into()));
            }
            let avg: Vec<f64> = s.u.iter().zip(vol).map(|(u, v)| u / v).collect();
            level_profile(c, mo.k, &avg, y)
        }
        Quantity::Flux => level_profile(c, mo.k - 1, &s.w, y),
        Quantity::PrimalFlux => level_profile(c, mo.k - 1, &mo.primal_flux(s)?, y),
    }
}

/// Profile of the observed data of a sample whose observation covers the
/// whole state.
pub fn data_profile(mo: &SurrogateModel, sample: &Sample, q: Quantity, y: f64) -> Result<Profile> {
    let n = mo.n_state();
    let mut x = vec![f64::NAN; n];
    for (&i, &v) in sample.data.indices.iter().zip(&sample.data.values) {
        if i < n {
            x[i] = v;
        }
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("sample '{}' does not observe the whole state", sample.name)));
    }
    state_profile(mo, &State::from_vec(mo, &x)?, q, y)
}
