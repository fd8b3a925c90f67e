//! File formats: JSON measurements, binary state store, JSONL queries, CSV
//! reports and the simulation config.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pack_lower, packed_len, unpack_lower, Matrix, Vector};
use crate::model::{NoiseVar, VertexMeasurements};
use crate::query::{CIResult, RegionQuery};
use crate::sim::{CoverageReport, NoiseKind, SimConfig, SimQuery};
use crate::spine::{Tree, VertexId};
use crate::twopass::{StateStore, VertexState};

pub const MEASUREMENTS_VERSION: u32 = 1;

/// Write through a temporary file in the target directory, then rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- measurements

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementsFile {
    pub version: u32,
    pub n: usize,
    pub vertices: Vec<VertexRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexRecord {
    pub id: String,
    pub parent: Option<String>,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var_full: Option<Vec<Vec<f64>>>,
}

/// A parsed measurements file: vertex `i` is the `i`-th record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub tree: Tree,
    pub meas: Vec<VertexMeasurements>,
}

fn parse_err(context: impl Into<String>, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: context.into(),
        message: message.to_string(),
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> std::result::Result<Matrix, String> {
    if let Some(r) = rows.iter().find(|r| r.len() != cols) {
        return Err(format!("{what} row has {} entries, expected {cols}", r.len()));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl MeasurementsFile {
    pub fn into_dataset(self) -> Result<Dataset> {
        if self.version != MEASUREMENTS_VERSION {
            return Err(parse_err("header", format!("unsupported version {}", self.version)));
        }
        if self.n == 0 {
            return Err(parse_err("header", "n must be positive"));
        }
        if self.vertices.is_empty() {
            return Err(parse_err("vertices", "no vertex records"));
        }
        let ctx = |i: usize, r: &VertexRecord| format!("record {i} (id {:?})", r.id);
        let mut index: HashMap<&str, VertexId> = HashMap::new();
        for (i, r) in self.vertices.iter().enumerate() {
            if index.insert(r.id.as_str(), i).is_some() {
                return Err(parse_err(ctx(i, r), Error::DuplicateVertex(i)));
            }
        }
        let names: Vec<String> = self.vertices.iter().map(|r| r.id.clone()).collect();
        let mut pairs = Vec::with_capacity(self.vertices.len());
        let mut root = None;
        for (i, r) in self.vertices.iter().enumerate() {
            match &r.parent {
                None if root.is_some() => return Err(Error::MultipleRoots(i).named(&names)),
                None => root = Some(i),
                Some(p) => {
                    let &pi = index
                        .get(p.as_str())
                        .ok_or_else(|| parse_err(ctx(i, r), format!("unknown parent {p:?}")))?;
                    pairs.push((i, pi));
                }
            }
        }
        let root = root.ok_or_else(|| parse_err("vertices", "no record has a null parent"))?;
        let tree = Tree::build(&pairs, root).map_err(|e| e.named(&names))?;

        let n = self.n;
        let mut meas = Vec::with_capacity(self.vertices.len());
        for (i, r) in self.vertices.iter().enumerate() {
            let design = rows_to_matrix(&r.s, n, "S").map_err(|m| parse_err(ctx(i, r), m))?;
            let noise = match (&r.var, &r.var_full) {
                (Some(d), None) => NoiseVar::Diagonal(Vector::from_column_slice(d)),
                (None, Some(f)) => NoiseVar::Full(
                    rows_to_matrix(f, f.len(), "var_full").map_err(|m| parse_err(ctx(i, r), m))?,
                ),
                _ => return Err(parse_err(ctx(i, r), "exactly one of var or var_full is required")),
            };
            let m = VertexMeasurements::new(design, Vector::from_column_slice(&r.y), noise)
                .map_err(|e| e.at_vertex(i).named(&names))?;
            meas.push(m);
        }
        Ok(Dataset { names, tree, meas })
    }
}

impl Dataset {
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let file: MeasurementsFile =
            serde_json::from_str(text).map_err(|e| parse_err(context, e))?;
        file.into_dataset()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| parse_err(path.display().to_string(), e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_record(&self) -> MeasurementsFile {
        let n = self.meas.first().map_or(0, |m| m.cols());
        let vertices = self
            .meas
            .iter()
            .enumerate()
            .map(|(g, m)| {
                let (var, var_full) = match m.noise() {
                    NoiseVar::Diagonal(d) => (Some(d.iter().copied().collect()), None),
                    NoiseVar::Full(f) => (None, Some(matrix_to_rows(f))),
                };
                VertexRecord {
                    id: self.names[g].clone(),
                    parent: self.tree.parent(g).map(|p| self.names[p].clone()),
                    s: matrix_to_rows(m.design()),
                    y: m.obs().iter().copied().collect(),
                    var,
                    var_full,
                }
            })
            .collect();
        MeasurementsFile {
            version: MEASUREMENTS_VERSION,
            n,
            vertices,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_record()).expect("plain data serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// Dataset with vertex names equal to the numeric ids.
    pub fn unnamed(tree: Tree, meas: Vec<VertexMeasurements>) -> Self {
        let names = (0..tree.len()).map(|g| g.to_string()).collect();
        Self { names, tree, meas }
    }
}

// ---------------------------------------------------------------- state store

const STORE_MAGIC: &[u8; 8] = b"TGLSSTOR";
pub const STORE_VERSION: u32 = 1;

/// A [`StateStore`] together with vertex names.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStore {
    pub names: Vec<String>,
    pub store: StateStore,
}

impl LabeledStore {
    pub fn lookup(&self, name: &str) -> Option<VertexId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_index(&self) -> HashMap<&str, VertexId> {
        self.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
    }

    /// Little-endian binary layout: magic, version, n, vertex count, then per
    /// vertex: parent (u64::MAX for the root), name, β̃, packed Var(β̃),
    /// A row-major, packed Var(β̂(·|·−)).
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.store;
        let n = s.n();
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(s.tree().len() as u64).to_le_bytes());
        let put = |out: &mut Vec<u8>, xs: &mut dyn Iterator<Item = f64>| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for g in 0..s.tree().len() {
            let parent = s.tree().parent(g).map_or(u64::MAX, |p| p as u64);
            out.extend_from_slice(&parent.to_le_bytes());
            let name = self.names[g].as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            put(&mut out, &mut s.beta_final(g).iter().copied());
            put(&mut out, &mut pack_lower(s.var_final(g)).into_iter());
            put(&mut out, &mut s.a(g).transpose().iter().copied());
            put(&mut out, &mut pack_lower(s.var_up(g)).into_iter());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err(Error::BadStore("missing magic header".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::BadStore(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let count = r.u64()?;
        if n == 0 || count == 0 {
            return Err(Error::BadStore("empty store".into()));
        }
        // each vertex needs at least 12 header bytes
        if count > (bytes.len() / 12) as u64 {
            return Err(Error::BadStore(format!("vertex count {count} exceeds file size")));
        }
        let count = count as usize;
        let mut pairs = Vec::with_capacity(count);
        let mut root = None;
        let mut names = Vec::with_capacity(count);
        let mut states = Vec::with_capacity(count);
        for g in 0..count {
            match r.u64()? {
                u64::MAX if root.is_some() => return Err(Error::BadStore("two roots".into())),
                u64::MAX => root = Some(g),
                p if p < count as u64 => pairs.push((g, p as usize)),
                p => return Err(Error::BadStore(format!("vertex {g} has parent {p} out of range"))),
            }
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::BadStore(format!("vertex {g} name is not UTF-8")))?;
            names.push(name);
            let beta = Vector::from_vec(r.f64s(n)?);
            let var_final = unpack_lower(&r.f64s(packed_len(n))?, n);
            let a = Matrix::from_row_slice(n, n, &r.f64s(n * n)?);
            let var_up = unpack_lower(&r.f64s(packed_len(n))?, n);
            states.push(VertexState {
                beta_final: beta,
                var_final,
                a,
                var_up,
                detail: None,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::BadStore(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let root = root.ok_or_else(|| Error::BadStore("no root".into()))?;
        let tree = Tree::build(&pairs, root).map_err(|e| Error::BadStore(e.to_string()))?;
        Ok(Self {
            names,
            store: StateStore::from_parts(tree, n, states)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::BadStore(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let raw = self.take(k.checked_mul(8).ok_or_else(|| Error::BadStore("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

// ---------------------------------------------------------------- queries

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    /// Shorthand for the unit vector selecting one histogram cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_index: Option<usize>,
    pub leaves: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<bool>,
}

impl QueryRecord {
    /// Resolve names and fill in defaults. `context` names the record in
    /// error messages.
    pub fn resolve(
        &self,
        names: &HashMap<&str, VertexId>,
        n: usize,
        default_alpha: f64,
        default_clamp: bool,
        context: &str,
    ) -> Result<RegionQuery> {
        let q = match (&self.q, self.q_index) {
            (Some(q), None) => Vector::from_column_slice(q),
            (None, Some(i)) if i < n => {
                let mut q = Vector::zeros(n);
                q[i] = 1.0;
                q
            }
            (None, Some(i)) => {
                return Err(parse_err(context, format!("q_index {i} out of range for n={n}")))
            }
            _ => return Err(parse_err(context, "exactly one of q or q_index is required")),
        };
        if q.len() != n {
            return Err(parse_err(context, format!("q has length {}, expected {n}", q.len())));
        }
        let leaves = self
            .leaves
            .iter()
            .map(|l| {
                names
                    .get(l.as_str())
                    .copied()
                    .ok_or_else(|| parse_err(context, format!("unknown vertex {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionQuery::new(q, leaves, self.alpha.unwrap_or(default_alpha))
            .clamped(self.clamp.unwrap_or(default_clamp)))
    }
}

/// One JSON object per non-blank line.
pub fn parse_queries(text: &str, context: &str) -> Result<Vec<QueryRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| parse_err(format!("{context}:{}", i + 1), e))
        })
        .collect()
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| parse_err(path.display().to_string(), e))?;
    parse_queries(&text, &path.display().to_string())
}

// ---------------------------------------------------------------- CSV

/// `x` with 9 significant digits, fixed notation for moderate magnitudes.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mant, e) = s.split_once('e').expect("exponent present");
        let mant = if mant.contains('.') {
            mant.trim_end_matches('0').trim_end_matches('.')
        } else {
            mant
        };
        format!("{mant}e{e}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn query_csv(rows: &[(String, CIResult)]) -> String {
    let mut out = String::from("query_id,estimate,variance,lower,upper\n");
    for (id, r) in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            csv_field(id),
            fmt_sig(r.estimate),
            fmt_sig(r.variance),
            fmt_sig(r.lower),
            fmt_sig(r.upper)
        );
    }
    out
}

pub fn coverage_csv(report: &CoverageReport) -> String {
    let mut out = String::from("query_id,alpha,clamped,coverage,mean_width,replicates\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&r.query_id),
            fmt_sig(r.alpha),
            r.clamped,
            fmt_sig(r.coverage),
            fmt_sig(r.mean_width),
            report.replicates
        );
    }
    out
}

pub fn qq_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("theoretical,empirical\n");
    for (t, e) in pairs {
        let _ = writeln!(out, "{},{}", fmt_sig(*t), fmt_sig(*e));
    }
    out
}

// ---------------------------------------------------------------- sim config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKindSpec {
    Gaussian,
    DiscreteGaussian,
}

/// Where the tree, designs and noise variances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    /// Tree, `S` and noise from a measurements file; its `y` values are
    /// ignored. Relative paths resolve against the config file.
    File { measurements: PathBuf },
    /// Complete tree with identity designs and equal diagonal noise.
    Complete {
        fanout: usize,
        depth: usize,
        n: usize,
        noise_var: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthSpec {
    /// Every leaf cell equals this value.
    Constant { constant: f64 },
    /// Per-leaf vectors keyed by vertex name.
    Leaves { leaves: HashMap<String, Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimQuerySpec {
    pub id: String,
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub q_index: Option<usize>,
    pub leaves: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfigFile {
    pub model: ModelSpec,
    pub truth: TruthSpec,
    #[serde(default = "default_noise_kind")]
    pub noise_kind: NoiseKindSpec,
    pub replicates: usize,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    pub queries: Vec<SimQuerySpec>,
}

fn default_noise_kind() -> NoiseKindSpec {
    NoiseKindSpec::Gaussian
}

impl SimConfigFile {
    /// Read and build a config file; `seed_override` replaces its seed.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<(SimConfig, Vec<SimQuery>)> {
        let bytes = read_file(path)?;
        let file: SimConfigFile =
            serde_json::from_slice(&bytes).map_err(|e| parse_err(path.display().to_string(), e))?;
        file.build(path.parent().unwrap_or(Path::new(".")), seed_override)
    }

    /// Build the simulation. `seed_override` replaces the file's seed.
    pub fn build(&self, base_dir: &Path, seed_override: Option<u64>) -> Result<(SimConfig, Vec<SimQuery>)> {
        let ds = match &self.model {
            ModelSpec::File { measurements } => Dataset::load(&base_dir.join(measurements))?,
            &ModelSpec::Complete {
                fanout,
                depth,
                n,
                noise_var,
            } => {
                if fanout < 1 || n == 0 {
                    return Err(Error::Config("fanout and n must be positive".into()));
                }
                let tree = crate::synth::complete_tree(fanout, depth);
                let meas = (0..tree.len())
                    .map(|_| VertexMeasurements::identity(Vector::zeros(n), noise_var))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(e.to_string()))?;
                Dataset::unnamed(tree, meas)
            }
        };
        let n = ds.meas[0].cols();
        let names: HashMap<&str, VertexId> =
            ds.names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let leaf_beta: Vec<Vector> = match &self.truth {
            TruthSpec::Constant { constant } => {
                vec![Vector::from_element(n, *constant); ds.tree.leaves().len()]
            }
            TruthSpec::Leaves { leaves } => ds
                .tree
                .leaves()
                .iter()
                .map(|&l| {
                    leaves
                        .get(&ds.names[l])
                        .map(|v| Vector::from_column_slice(v))
                        .ok_or_else(|| Error::Config(format!("no truth for leaf {:?}", ds.names[l])))
                })
                .collect::<Result<_>>()?,
        };
        let queries = self
            .queries
            .iter()
            .map(|qs| {
                let rec = QueryRecord {
                    id: qs.id.clone(),
                    q: qs.q.clone(),
                    q_index: qs.q_index,
                    leaves: qs.leaves.clone(),
                    alpha: None,
                    clamp: None,
                };
                let rq = rec.resolve(&names, n, 0.5, false, &format!("query {:?}", qs.id))?;
                Ok(SimQuery {
                    id: qs.id.clone(),
                    q: rq.q,
                    leaves: rq.leaves,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let kind = match self.noise_kind {
            NoiseKindSpec::Gaussian => NoiseKind::Gaussian,
            NoiseKindSpec::DiscreteGaussian => NoiseKind::DiscreteGaussian,
        };
        let designs = ds.meas.iter().map(|m| m.design().clone()).collect();
        let noise = ds.meas.iter().map(|m| m.noise().clone()).collect();
        let cfg = SimConfig::new(
            ds.tree,
            designs,
            noise,
            &leaf_beta,
            kind,
            self.replicates,
            self.alphas.clone(),
            seed_override.unwrap_or(self.seed),
        )?;
        Ok((cfg, queries))
    }
}
