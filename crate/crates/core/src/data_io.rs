//! Feature files, label tables, dataset loading and model persistence.
//!
//! Feature file (`.fbag`), little-endian:
//!
//! ```text
//!   "FBAG" | version u32 | n u32 | dim u32 | n*dim f32 row-major
//!   | flag u8 (1 = coordinates follow) | n * (row u32, col u32)
//! ```
//!
//! Model file (`.cdpm`), little-endian:
//!
//! ```text
//!   "CDPM" | version u32 | section count u32
//!   | count * (tag [u8; 4], offset u64, length u64)
//!   | section payloads, each a sequence of f64
//! ```
//!
//! Offsets are absolute byte positions and lengths are in bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::distributions::NIWParams;
use crate::dp_mixture::{DPMixtureState, FitConfig};
use crate::encoder::EncoderParams;
use crate::pipeline::{Bag, PatchConfig, Pooling, Projection, TrainConfig, TrainedModel};
use crate::special_math::SpdMatrix;
use crate::stick_breaking::StickPosterior;
use crate::{Error, Result};

pub const FBAG_MAGIC: &[u8; 4] = b"FBAG";
pub const FBAG_VERSION: u32 = 1;
pub const CDPM_MAGIC: &[u8; 4] = b"CDPM";
pub const CDPM_VERSION: u32 = 1;
pub const FEATURE_EXT: &str = "fbag";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Little-endian cursor over a byte buffer that reports short reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            format_err(
                self.path,
                format!("truncated {what}: need {} bytes at offset {}, file has {}", n, self.pos, self.buf.len()),
            )
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn encode_feature_file(features: &DMatrix<f64>, coords: Option<&[(u32, u32)]>) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    if let Some(c) = coords {
        if c.len() != n {
            return Err(Error::Shape(format!("{} coordinates for {n} instances", c.len())));
        }
    }
    let n32 = u32::try_from(n).map_err(|_| Error::Shape("too many instances".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Shape("dimension too large".into()))?;
    let mut out = Vec::with_capacity(17 + 4 * n * d + coords.map_or(0, |c| 8 * c.len()));
    out.extend_from_slice(FBAG_MAGIC);
    out.extend_from_slice(&FBAG_VERSION.to_le_bytes());
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for r in 0..n {
        for c in 0..d {
            let v = features[(r, c)] as f32;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("feature ({r}, {c}) is not finite in f32")));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match coords {
        Some(cs) => {
            out.push(1);
            for (r, c) in cs {
                out.extend_from_slice(&r.to_le_bytes());
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    Ok(out)
}

/// Features and optional coordinates of one feature file.
pub type FeatureData = (DMatrix<f64>, Option<Vec<(u32, u32)>>);

pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<FeatureData> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4, "magic")? != FBAG_MAGIC {
        return Err(format_err(path, "bad magic, expected FBAG"));
    }
    let version = r.u32("version")?;
    if version != FBAG_VERSION {
        return Err(format_err(path, format!("unsupported feature file version {version} (reader supports {FBAG_VERSION})")));
    }
    let n = r.u32("instance count")? as usize;
    let d = r.u32("dimension")? as usize;
    if n == 0 || d == 0 {
        return Err(format_err(path, format!("empty feature matrix ({n} x {d})")));
    }
    let need = n.checked_mul(d).and_then(|v| v.checked_mul(4)).ok_or_else(|| format_err(path, "size overflow"))?;
    if bytes.len() < 16 + need + 1 {
        return Err(format_err(
            path,
            format!("truncated payload: expected at least {} bytes for {n} x {d} features, file has {}", 16 + need + 1, bytes.len()),
        ));
    }
    let raw = r.take(need, "features")?;
    let mut x = DMatrix::zeros(n, d);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err(path, format!("non-finite value at instance {}, feature {}", i / d, i % d)));
        }
        x[(i / d, i % d)] = f64::from(v);
    }
    let coords = match r.u8("coordinate flag")? {
        0 => None,
        1 => {
            let expected = 16 + need + 1 + 8 * n;
            if bytes.len() < expected {
                return Err(format_err(path, format!("truncated coordinates: expected {expected} bytes, file has {}", bytes.len())));
            }
            let mut c = Vec::with_capacity(n);
            for _ in 0..n {
                c.push((r.u32("row")?, r.u32("col")?));
            }
            Some(c)
        }
        f => return Err(format_err(path, format!("invalid coordinate flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(format_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((x, coords))
}

pub fn write_feature_file(path: &Path, features: &DMatrix<f64>, coords: Option<&[(u32, u32)]>) -> Result<()> {
    let bytes = encode_feature_file(features, coords)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes, path)
}

/// `bag_id<TAB>label` records in file order.
pub fn read_label_table(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_table(&text, path)
}

pub fn parse_label_table(text: &str, path: &Path) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(id), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format_err(path, format!("line {}: expected bag_id<TAB>label", i + 1)));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| format_err(path, format!("line {}: label {label:?} is not a nonnegative integer", i + 1)))?;
        if id.is_empty() {
            return Err(format_err(path, format!("line {}: empty bag id", i + 1)));
        }
        if !seen.insert(id.to_string()) {
            return Err(format_err(path, format!("line {}: duplicate bag id {id}", i + 1)));
        }
        out.push((id.to_string(), label));
    }
    Ok(out)
}

pub fn write_label_table(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut s = String::from("# bag_id\tlabel\n");
    for (id, y) in rows {
        s.push_str(&format!("{id}\t{y}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn feature_path(dir: &Path, bag_id: &str) -> PathBuf {
    dir.join(format!("{bag_id}.{FEATURE_EXT}"))
}

/// Loads bags sorted by id. With a label table, exactly its bags are
/// loaded; otherwise every feature file in `dir`, unlabeled.
pub fn load_dataset(dir: &Path, labels: Option<&Path>) -> Result<Vec<Bag>> {
    let entries: Vec<(String, Option<usize>)> = match labels {
        Some(lp) => read_label_table(lp)?.into_iter().map(|(id, y)| (id, Some(y))).collect(),
        None => {
            let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut ids = Vec::new();
            for ent in rd {
                let p = ent.map_err(|e| Error::io(dir, e))?.path();
                if p.extension().and_then(|e| e.to_str()) == Some(FEATURE_EXT) {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        ids.push((stem.to_string(), None));
                    }
                }
            }
            ids
        }
    };
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no bags found for {}", dir.display())));
    }
    let missing: Vec<&str> = entries
        .iter()
        .filter(|(id, _)| !feature_path(dir, id).is_file())
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing feature files in {} for bag ids: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let mut bags = Vec::with_capacity(entries.len());
    for (id, y) in entries {
        let (features, coords) = read_feature_file(&feature_path(dir, &id))?;
        bags.push(Bag { bag_id: id, features, label: y, coords });
    }
    bags.sort_by(|a, b| a.bag_id.cmp(&b.bag_id));
    let d = bags[0].dim();
    if let Some(b) = bags.iter().find(|b| b.dim() != d) {
        return Err(Error::Dataset(format!(
            "bag {} has dimension {}, bag {} has {d}",
            b.bag_id,
            b.dim(),
            bags[0].bag_id
        )));
    }
    Ok(bags)
}

/// Writes `<bag_id>.fbag` for every bag and, when all are labeled, a label table.
pub fn save_dataset(dir: &Path, bags: &[Bag], labels_path: Option<&Path>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for b in bags {
        write_feature_file(&feature_path(dir, &b.bag_id), &b.features, b.coords.as_deref())?;
    }
    if let Some(lp) = labels_path {
        let rows: Vec<(String, usize)> = bags
            .iter()
            .map(|b| {
                b.label
                    .map(|y| (b.bag_id.clone(), y))
                    .ok_or_else(|| Error::Dataset(format!("bag {} is unlabeled", b.bag_id)))
            })
            .collect::<Result<_>>()?;
        write_label_table(lp, &rows)?;
    }
    Ok(())
}

// ---- model container ----

#[derive(Default)]
struct Sections(Vec<([u8; 4], Vec<f64>)>);

impl Sections {
    fn push(&mut self, tag: &[u8; 4], data: Vec<f64>) {
        self.0.push((*tag, data));
    }

    fn encode(&self) -> Vec<u8> {
        let header = 12 + 20 * self.0.len();
        let mut out = Vec::new();
        out.extend_from_slice(CDPM_MAGIC);
        out.extend_from_slice(&CDPM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        let mut offset = header as u64;
        for (tag, data) in &self.0 {
            let len = 8 * data.len() as u64;
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
            offset += len;
        }
        for (_, data) in &self.0 {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(4, "magic")? != CDPM_MAGIC {
            return Err(format_err(path, "bad magic, expected CDPM"));
        }
        let version = r.u32("version")?;
        if version != CDPM_VERSION {
            return Err(Error::Version { found: version, supported: CDPM_VERSION });
        }
        let count = r.u32("section count")? as usize;
        let mut out = Sections::default();
        for i in 0..count {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let off = r.u64("section offset")? as usize;
            let len = r.u64("section length")? as usize;
            if !len.is_multiple_of(8) || off.checked_add(len).is_none_or(|e| e > bytes.len()) {
                return Err(format_err(path, format!("section {i} ({}) out of bounds", String::from_utf8_lossy(&tag))));
            }
            let data = bytes[off..off + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.0.push((tag, data));
        }
        Ok(out)
    }

    fn get(&self, tag: &[u8; 4], path: &Path) -> Result<Cursor<'_>> {
        self.0
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, d)| Cursor { data: d, pos: 0, tag: *tag })
            .ok_or_else(|| format_err(path, format!("missing section {}", String::from_utf8_lossy(tag))))
    }

    fn has(&self, tag: &[u8; 4]) -> bool {
        self.0.iter().any(|(t, _)| t == tag)
    }
}

struct Cursor<'a> {
    data: &'a [f64],
    pos: usize,
    tag: [u8; 4],
}

impl Cursor<'_> {
    fn next(&mut self, path: &Path) -> Result<f64> {
        let v = self.data.get(self.pos).copied().ok_or_else(|| {
            format_err(path, format!("section {} ended early", String::from_utf8_lossy(&self.tag)))
        })?;
        self.pos += 1;
        Ok(v)
    }

    fn usize(&mut self, path: &Path) -> Result<usize> {
        let v = self.next(path)?;
        if !(v >= 0.0 && v.fract() == 0.0 && v < 1e15) {
            return Err(format_err(path, format!("expected a count in section {}, got {v}", String::from_utf8_lossy(&self.tag))));
        }
        Ok(v as usize)
    }

    fn bits(&mut self, path: &Path) -> Result<u64> {
        Ok(self.next(path)?.to_bits())
    }

    fn flag(&mut self, path: &Path) -> Result<bool> {
        Ok(self.next(path)? != 0.0)
    }

    fn vec(&mut self, n: usize, path: &Path) -> Result<Vec<f64>> {
        (0..n).map(|_| self.next(path)).collect()
    }
}

fn b(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

fn opt(v: Option<usize>) -> [f64; 2] {
    match v {
        Some(x) => [1.0, x as f64],
        None => [0.0, 0.0],
    }
}

fn push_fit(out: &mut Vec<f64>, f: &FitConfig) {
    out.extend([
        f.max_iters as f64,
        f.rel_tol,
        f.lr,
        f.grad_clip,
        f64::from_bits(f.seed),
        f.inner_grad_steps as f64,
        f.entropy_weight,
        b(f.closed_form_heads),
        b(f.train_network),
        b(f.update_encoders),
        b(f.merge_moves),
        f.merge_every as f64,
    ]);
}

fn read_fit(c: &mut Cursor<'_>, path: &Path) -> Result<FitConfig> {
    Ok(FitConfig {
        max_iters: c.usize(path)?,
        rel_tol: c.next(path)?,
        lr: c.next(path)?,
        grad_clip: c.next(path)?,
        seed: c.bits(path)?,
        inner_grad_steps: c.usize(path)?,
        entropy_weight: c.next(path)?,
        closed_form_heads: c.flag(path)?,
        train_network: c.flag(path)?,
        update_encoders: c.flag(path)?,
        merge_moves: c.flag(path)?,
        merge_every: c.usize(path)?,
    })
}

fn read_opt(c: &mut Cursor<'_>, path: &Path) -> Result<Option<usize>> {
    let present = c.flag(path)?;
    let v = c.usize(path)?;
    Ok(present.then_some(v))
}

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut s = Sections::default();

    let mut conf = vec![model.n_classes as f64, model.input_dim as f64];
    conf.extend([cfg.patch.truncation as f64, cfg.patch.eta]);
    conf.extend(opt(cfg.patch.hidden));
    push_fit(&mut conf, &cfg.patch.fit);
    conf.extend(opt(cfg.n_components));
    conf.push(cfg.eta2);
    conf.extend(opt(cfg.slide_hidden));
    push_fit(&mut conf, &cfg.slide_fit);
    conf.extend([cfg.epochs as f64, cfg.patience as f64, f64::from_bits(cfg.seed), b(cfg.cache_aggregation)]);
    conf.extend(opt(cfg.project_dim));
    conf.push(match cfg.pooling {
        Pooling::LogMean => 0.0,
        Pooling::Mean => 1.0,
    });
    s.push(b"CONF", conf);

    let st = &model.slide;
    let p = st.dim();
    let mut prio = vec![p as f64, st.prior.kappa];
    prio.extend(st.prior.m.iter());
    prio.extend(st.prior.v.cholesky_factor().iter());
    s.push(b"PRIO", prio);

    let t = st.truncation();
    let mut stik = vec![t as f64, st.eta];
    stik.extend(&st.sticks.gamma1);
    stik.extend(&st.sticks.gamma2);
    s.push(b"STIK", stik);

    let mut encs = vec![t as f64];
    for e in &st.encoders {
        encs.extend([e.input_dim() as f64, e.hidden() as f64]);
        encs.extend(e.as_slice());
    }
    s.push(b"ENCS", encs);

    let (n, k) = st.log_phi.shape();
    let mut phi = vec![n as f64, k as f64];
    phi.extend(st.log_phi.iter());
    s.push(b"SPHI", phi);

    let mut meta = vec![b(st.converged), st.iterations as f64, st.elbo_trace.len() as f64];
    meta.extend(&st.elbo_trace);
    s.push(b"SMET", meta);

    s.push(b"CMAP", model.class_map.iter().map(|c| *c as f64).collect());
    s.push(b"SWGT", model.slide_weights.clone());

    if let Some(pr) = &model.projection {
        let (r, c) = pr.matrix.shape();
        let mut v = vec![r as f64, c as f64];
        v.extend(pr.matrix.iter());
        s.push(b"PROJ", v);
    }
    s.encode()
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let s = Sections::decode(bytes, path)?;
    let bad = |msg: String| format_err(path, msg);

    let mut c = s.get(b"CONF", path)?;
    let n_classes = c.usize(path)?;
    let input_dim = c.usize(path)?;
    let patch = PatchConfig {
        truncation: c.usize(path)?,
        eta: c.next(path)?,
        hidden: read_opt(&mut c, path)?,
        fit: read_fit(&mut c, path)?,
    };
    let n_components = read_opt(&mut c, path)?;
    let eta2 = c.next(path)?;
    let slide_hidden = read_opt(&mut c, path)?;
    let slide_fit = read_fit(&mut c, path)?;
    let config = TrainConfig {
        patch,
        n_components,
        eta2,
        slide_hidden,
        slide_fit,
        epochs: c.usize(path)?,
        patience: c.usize(path)?,
        seed: c.bits(path)?,
        cache_aggregation: c.flag(path)?,
        project_dim: read_opt(&mut c, path)?,
        pooling: match c.usize(path)? {
            0 => Pooling::LogMean,
            1 => Pooling::Mean,
            v => return Err(bad(format!("unknown pooling code {v}"))),
        },
    };

    let mut c = s.get(b"PRIO", path)?;
    let p = c.usize(path)?;
    let kappa = c.next(path)?;
    let m = DVector::from_vec(c.vec(p, path)?);
    let l = DMatrix::from_column_slice(p, p, &c.vec(p * p, path)?);
    let prior = NIWParams::new(m, kappa, SpdMatrix::from_cholesky(l)?).map_err(|e| bad(format!("invalid prior: {e}")))?;

    let mut c = s.get(b"STIK", path)?;
    let t = c.usize(path)?;
    let eta = c.next(path)?;
    let sticks = StickPosterior { gamma1: c.vec(t, path)?, gamma2: c.vec(t, path)?, eta };

    let mut c = s.get(b"ENCS", path)?;
    let count = c.usize(path)?;
    if count != t {
        return Err(bad(format!("{count} encoders for truncation {t}")));
    }
    let mut encoders = Vec::with_capacity(count);
    for _ in 0..count {
        let ip = c.usize(path)?;
        let h = c.usize(path)?;
        let theta = c.vec(EncoderParams::param_count(ip, h), path)?;
        encoders.push(EncoderParams::from_parts(ip, h, theta)?);
    }

    let mut c = s.get(b"SPHI", path)?;
    let n = c.usize(path)?;
    let k = c.usize(path)?;
    let log_phi = DMatrix::from_column_slice(n, k, &c.vec(n * k, path)?);

    let mut c = s.get(b"SMET", path)?;
    let converged = c.flag(path)?;
    let iterations = c.usize(path)?;
    let tl = c.usize(path)?;
    let elbo_trace = c.vec(tl, path)?;

    let class_map: Vec<usize> = {
        let c = s.get(b"CMAP", path)?;
        c.data.iter().map(|v| *v as usize).collect()
    };
    let slide_weights = s.get(b"SWGT", path)?.data.to_vec();
    let projection = if s.has(b"PROJ") {
        let mut c = s.get(b"PROJ", path)?;
        let r = c.usize(path)?;
        let cc = c.usize(path)?;
        Some(Projection { matrix: DMatrix::from_column_slice(r, cc, &c.vec(r * cc, path)?) })
    } else {
        None
    };
    if class_map.len() != t || slide_weights.len() != t {
        return Err(bad("class map or weights do not match the truncation".into()));
    }
    if class_map.iter().any(|c| *c >= n_classes) {
        return Err(bad("class map refers to an unknown class".into()));
    }
    Ok(TrainedModel {
        slide: DPMixtureState { log_phi, sticks, encoders, prior, eta, converged, iterations, elbo_trace },
        class_map,
        n_classes,
        slide_weights,
        projection,
        config,
        input_dim,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

/// `bag_id<TAB>instance_index<TAB>flag` lines for instance-level labels.
pub fn write_instance_labels(path: &Path, labels: &BTreeMap<String, Vec<bool>>) -> Result<()> {
    let mut s = String::from("# bag_id\tinstance_index\ttumor\n");
    for (id, flags) in labels {
        for (j, f) in flags.iter().enumerate() {
            s.push_str(&format!("{id}\t{j}\t{}\n", u8::from(*f)));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_instance_labels(path: &Path) -> Result<BTreeMap<String, Vec<bool>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = match f.as_slice() {
            [id, j, v] => j.parse::<usize>().ok().zip(v.parse::<u8>().ok()).map(|(j, v)| (id, j, v)),
            _ => None,
        };
        let Some((id, j, v)) = parsed else {
            return Err(format_err(path, format!("line {}: expected bag_id<TAB>index<TAB>0|1", i + 1)));
        };
        let flags = out.entry(id.to_string()).or_default();
        if j != flags.len() || v > 1 {
            return Err(format_err(path, format!("line {}: out-of-order index or bad flag", i + 1)));
        }
        flags.push(v == 1);
    }
    Ok(out)
}
