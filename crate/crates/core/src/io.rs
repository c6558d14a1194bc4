//! On-disk formats. Every binary file is one compact JSON header line
//! followed by little-endian `f32` payload.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::IcaModel;
use crate::nets::{EpochLog, NetSpec, Network};
use crate::signal::{Annotation, EpochSet, Montage, Recording, Units};
use crate::source::{Atlas, LeadField};

const MAX_HEADER: u64 = 256 << 20;

fn write_header<H: Serialize>(w: &mut impl Write, header: &H) -> Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_f32s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Parse the header line, then check the payload holds exactly `count(header)` floats.
fn read_blob_file<H: DeserializeOwned>(path: &Path, count: impl Fn(&H) -> Result<usize>) -> Result<(H, Vec<f32>)> {
    let mut r = BufReader::new(open(path)?);
    let mut line = Vec::new();
    (&mut r).take(MAX_HEADER).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format(format!("{}: missing header line", path.display())));
    }
    let header: H = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::Format(format!("{}: malformed header: {e}", path.display())))?;
    let n = count(&header)?;
    let expected = n as u64 * 4;
    let mut payload = Vec::with_capacity(n * 4);
    r.read_to_end(&mut payload)?;
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{}: payload has {actual} bytes, header implies {expected}",
            path.display()
        )));
    }
    let floats = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, floats))
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| with_path(path, e))
}

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= (isize::MAX as usize) / 8)
        .ok_or_else(|| Error::Format(format!("dimensions {dims:?} overflow")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Epochs,
    Continuous,
}

/// Header of a NAIR v1 dataset. Continuous recordings are stored as one
/// trial with their event markers; epoch sets carry one label per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NairHeader {
    pub version: u32,
    pub fs: f64,
    pub n_channels: usize,
    pub channel_names: Vec<String>,
    /// Empty when channels are not electrodes (components, coefficients, regions).
    pub montage_theta: Vec<f64>,
    pub montage_phi: Vec<f64>,
    pub n_trials: usize,
    pub n_samples: usize,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<Units>,
}

impl NairHeader {
    fn payload_floats(&self) -> Result<usize> {
        checked_product(&[self.n_trials, self.n_channels, self.n_samples])
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Format(m));
        if self.version != 1 {
            return fail(format!("unsupported NAIR version {}", self.version));
        }
        if self.channel_names.len() != self.n_channels {
            return fail(format!("{} channel names for {} channels", self.channel_names.len(), self.n_channels));
        }
        if self.montage_theta.len() != self.montage_phi.len()
            || !(self.montage_theta.is_empty() || self.montage_theta.len() == self.n_channels)
        {
            return fail("montage angle arrays must be empty or one per channel".into());
        }
        match self.layout {
            Layout::Epochs if self.labels.len() != self.n_trials => {
                fail(format!("{} labels for {} trials", self.labels.len(), self.n_trials))
            }
            Layout::Continuous if self.n_trials != 1 => fail("continuous layout holds exactly one trial".into()),
            _ => Ok(()),
        }
    }

    fn montage(&self) -> Result<Option<Montage>> {
        if self.montage_theta.is_empty() {
            return Ok(None);
        }
        Montage::from_angles(self.channel_names.clone(), &self.montage_theta, &self.montage_phi).map(Some)
    }
}

fn electrode_angles(m: &Montage, f: fn(&Montage) -> Vec<f64>) -> Vec<f64> {
    if m.is_abstract() {
        Vec::new()
    } else {
        f(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Continuous(Recording),
    Epochs { epochs: EpochSet, montage: Option<Montage> },
}

impl Dataset {
    pub fn header(&self) -> NairHeader {
        match self {
            Dataset::Continuous(rec) => NairHeader {
                version: 1,
                fs: rec.fs(),
                n_channels: rec.n_channels(),
                channel_names: rec.montage().names().to_vec(),
                montage_theta: electrode_angles(rec.montage(), Montage::thetas),
                montage_phi: electrode_angles(rec.montage(), Montage::phis),
                n_trials: 1,
                n_samples: rec.n_samples(),
                labels: Vec::new(),
                layout: Layout::Continuous,
                events: rec.annotations().iter().map(|a| (a.sample, a.label)).collect(),
                window: None,
                units: None,
            },
            Dataset::Epochs { epochs, montage } => NairHeader {
                version: 1,
                fs: epochs.fs(),
                n_channels: epochs.n_channels(),
                channel_names: epochs.channel_names().to_vec(),
                montage_theta: montage.as_ref().map(|m| electrode_angles(m, Montage::thetas)).unwrap_or_default(),
                montage_phi: montage.as_ref().map(|m| electrode_angles(m, Montage::phis)).unwrap_or_default(),
                n_trials: epochs.n_trials(),
                n_samples: epochs.n_samples(),
                labels: epochs.labels().to_vec(),
                layout: Layout::Epochs,
                events: Vec::new(),
                window: Some(epochs.window()),
                units: Some(epochs.units()),
            },
        }
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            Dataset::Continuous(rec) => Box::new(rec.data().iter()),
            Dataset::Epochs { epochs, .. } => Box::new(epochs.data().iter()),
        }
    }

    fn from_parts(header: &NairHeader, data: Vec<f64>) -> Result<Self> {
        match header.layout {
            Layout::Continuous => {
                let montage = match header.montage()? {
                    Some(m) => m,
                    None => Montage::abstract_named(header.channel_names.clone())?,
                };
                let arr = Array2::from_shape_vec((header.n_channels, header.n_samples), data)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let annotations = header.events.iter().map(|&(sample, label)| Annotation { sample, label }).collect();
                Ok(Dataset::Continuous(Recording::new(arr, header.fs, montage, annotations)?))
            }
            Layout::Epochs => {
                let arr = Array3::from_shape_vec((header.n_trials, header.n_channels, header.n_samples), data)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let window = header.window.unwrap_or((0.0, header.n_samples as f64 / header.fs));
                let epochs = EpochSet::new(arr, header.labels.clone(), header.fs, window, header.channel_names.clone())?
                    .with_units(header.units.unwrap_or(Units::Raw));
                Ok(Dataset::Epochs { epochs, montage: header.montage()? })
            }
        }
    }

    pub fn into_recording(self) -> Result<Recording> {
        match self {
            Dataset::Continuous(rec) => Ok(rec),
            Dataset::Epochs { .. } => Err(Error::invalid("expected a continuous recording, found epochs")),
        }
    }

    pub fn into_epochs(self) -> Result<EpochSet> {
        match self {
            Dataset::Epochs { epochs, .. } => Ok(epochs),
            Dataset::Continuous(_) => Err(Error::invalid("expected epochs, found a continuous recording")),
        }
    }
}

pub fn write_nair(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    write_header(&mut w, &ds.header())?;
    write_f32s(&mut w, ds.values())?;
    w.flush()?;
    Ok(())
}

pub fn read_nair_header(path: &Path) -> Result<NairHeader> {
    let mut r = BufReader::new(open(path)?);
    let mut line = Vec::new();
    (&mut r).take(MAX_HEADER).read_until(b'\n', &mut line)?;
    let header: NairHeader = serde_json::from_slice(line.strip_suffix(b"\n").unwrap_or(&line))
        .map_err(|e| Error::Format(format!("{}: malformed header: {e}", path.display())))?;
    header.validate()?;
    Ok(header)
}

pub fn read_nair(path: &Path) -> Result<Dataset> {
    let (header, floats) = read_blob_file::<NairHeader>(path, |h| {
        h.validate()?;
        h.payload_floats()
    })?;
    Dataset::from_parts(&header, floats.into_iter().map(f64::from).collect())
}

/// One `trial_NNNNN.csv` per trial (a header row of channel names, then one
/// row per sample) and `meta.json` holding the NAIR header.
pub fn write_csv_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = ds.header();
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&header)?)?;
    let (c, t) = (header.n_channels, header.n_samples);
    let values: Vec<f64> = ds.values().copied().collect();
    for trial in 0..header.n_trials {
        let mut w = BufWriter::new(create(&dir.join(format!("trial_{trial:05}.csv")))?);
        writeln!(w, "{}", header.channel_names.join(","))?;
        let base = trial * c * t;
        for s in 0..t {
            let row: Vec<String> = (0..c).map(|ch| format!("{}", values[base + ch * t + s] as f32)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_csv_dir(dir: &Path) -> Result<Dataset> {
    let meta: NairHeader = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    meta.validate()?;
    let (c, t) = (meta.n_channels, meta.n_samples);
    let mut data = vec![0.0; meta.payload_floats()?];
    for trial in 0..meta.n_trials {
        let path = dir.join(format!("trial_{trial:05}.csv"));
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let names: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        if names != meta.channel_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Format(format!("{}: channel columns differ from meta.json", path.display())));
        }
        let mut rows = 0;
        for (s, line) in lines.enumerate() {
            if s >= t {
                return Err(Error::Format(format!("{}: more than {t} sample rows", path.display())));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != c {
                return Err(Error::Format(format!("{}:{}: expected {c} columns", path.display(), s + 2)));
            }
            for (ch, f) in fields.iter().enumerate() {
                let v: f32 = f
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("{}:{}: bad number {f:?}", path.display(), s + 2)))?;
                data[trial * c * t + ch * t + s] = f64::from(v);
            }
            rows += 1;
        }
        if rows != t {
            return Err(Error::Format(format!("{}: {rows} sample rows, expected {t}", path.display())));
        }
    }
    Dataset::from_parts(&meta, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct IcaHeader {
    format: String,
    n_channels: usize,
    n_components: usize,
    seed: u64,
    iterations: usize,
    component_order: Vec<usize>,
    artifact_flags: Vec<bool>,
}

/// Mixing, unmixing, whitener and channel means as `f32` blobs, in that order.
pub fn write_ica_model(path: &Path, model: &IcaModel) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    write_header(
        &mut w,
        &IcaHeader {
            format: "nair-ica-v1".into(),
            n_channels: model.n_channels(),
            n_components: model.n_components(),
            seed: model.seed,
            iterations: model.iterations,
            component_order: model.component_order.clone(),
            artifact_flags: model.artifact_flags.clone(),
        },
    )?;
    write_f32s(&mut w, model.mixing.iter().chain(&model.unmixing).chain(&model.whitener).chain(&model.mean))?;
    w.flush()?;
    Ok(())
}

pub fn read_ica_model(path: &Path) -> Result<IcaModel> {
    let (h, f) = read_blob_file::<IcaHeader>(path, |h| {
        let (c, k) = (h.n_channels, h.n_components);
        if h.component_order.len() != k || h.artifact_flags.len() != k {
            return Err(Error::Format("component order/flags length differs from component count".into()));
        }
        Ok(3 * checked_product(&[c, k])? + c)
    })?;
    let (c, k) = (h.n_channels, h.n_components);
    let v: Vec<f64> = f.into_iter().map(f64::from).collect();
    let shape = |r, cols, off: usize| Array2::from_shape_vec((r, cols), v[off..off + r * cols].to_vec()).expect("sized");
    Ok(IcaModel {
        mixing: shape(c, k, 0),
        unmixing: shape(k, c, c * k),
        whitener: shape(k, c, 2 * c * k),
        mean: Array1::from(v[3 * c * k..].to_vec()),
        component_order: h.component_order,
        artifact_flags: h.artifact_flags,
        seed: h.seed,
        iterations: h.iterations,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LeadFieldHeader {
    channels: usize,
    dipoles: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 3]>>,
}

pub fn write_leadfield(path: &Path, lf: &LeadField) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    let header = LeadFieldHeader {
        channels: lf.n_channels(),
        dipoles: lf.n_dipoles(),
        positions: lf.positions().map(<[_]>::to_vec),
    };
    write_header(&mut w, &header)?;
    write_f32s(&mut w, lf.matrix().iter())?;
    w.flush()?;
    Ok(())
}

pub fn read_leadfield(path: &Path) -> Result<LeadField> {
    let (h, f) = read_blob_file::<LeadFieldHeader>(path, |h| checked_product(&[h.channels, h.dipoles]))?;
    let m = Array2::from_shape_vec((h.channels, h.dipoles), f.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    LeadField::new(m, h.positions)
}

/// `regions N`, then N region names, then one region index per dipole.
pub fn write_atlas(path: &Path, atlas: &Atlas) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    writeln!(w, "regions {}", atlas.n_regions())?;
    for name in atlas.names() {
        writeln!(w, "{name}")?;
    }
    for r in atlas.region_of() {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_atlas(path: &Path) -> Result<Atlas> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let n: usize = lines
        .next()
        .and_then(|l| l.trim().strip_prefix("regions"))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad("first line must be `regions N`"))?;
    let names: Vec<String> = lines.by_ref().take(n).map(|l| l.trim().to_string()).collect();
    if names.len() != n {
        return Err(bad("fewer region names than declared"));
    }
    let region_of = lines
        .map(|l| l.trim().parse::<usize>().map_err(|_| bad(&format!("bad region index {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Atlas::new(region_of, names)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    spec: NetSpec,
    epoch: usize,
    metrics: Vec<EpochLog>,
    /// (layer, parameter name, shape) for every blob, in payload order.
    tensors: Vec<(usize, String, Vec<usize>)>,
}

pub fn write_checkpoint(path: &Path, net: &Network, epoch: usize, metrics: &[EpochLog]) -> Result<()> {
    let tensors = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.params.iter().map(move |p| (i, p.name.clone(), p.shape.clone())))
        .collect();
    let header = CheckpointHeader {
        format: "nair-net-v1".into(),
        spec: net.spec().clone(),
        epoch,
        metrics: metrics.to_vec(),
        tensors,
    };
    let mut w = BufWriter::new(create(path)?);
    write_header(&mut w, &header)?;
    for l in net.layers() {
        for p in &l.params {
            write_f32s(&mut w, &p.value)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Network, saved epoch and training log.
pub fn read_checkpoint(path: &Path) -> Result<(Network, usize, Vec<EpochLog>)> {
    let (h, f) = read_blob_file::<CheckpointHeader>(path, |h| {
        h.tensors.iter().try_fold(0usize, |a, t| Ok(a + checked_product(&t.2)?))
    })?;
    let mut net = Network::new(h.spec.clone(), 0)?;
    let mut offset = 0;
    let mut expected = net
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.params.iter().map(move |p| (i, p.name.clone(), p.shape.clone())))
        .collect::<Vec<_>>()
        .into_iter();
    for t in &h.tensors {
        if expected.next().as_ref() != Some(t) {
            return Err(Error::Format(format!("checkpoint tensor {t:?} does not match the network spec")));
        }
        let n: usize = t.2.iter().product();
        let p = net.layers_mut()[t.0].params.iter_mut().find(|p| p.name == t.1).expect("matched above");
        p.value = f[offset..offset + n].iter().map(|&v| f64::from(v)).collect();
        offset += n;
    }
    if expected.next().is_some() {
        return Err(Error::Format("checkpoint is missing tensors".into()));
    }
    Ok((net, h.epoch, h.metrics))
}

/// Stream a file through SHA-256.
pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut r = BufReader::new(open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn trial_csv_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("trial_") && n.ends_with(".csv")))
        .collect();
    v.sort();
    Ok(v)
}
