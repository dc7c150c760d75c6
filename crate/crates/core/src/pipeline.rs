//! Offline/online orchestration, snapshot persistence, benchmarks and
//! report tables.
//!
//! # Snapshot files
//!
//! Each `.arms` file holds one dense matrix: the bytes `ARMS`, a format
//! version (`u32`), the row and column counts (`u64`), then the entries in
//! column-major order as `f64`, all little-endian. A `manifest.toml` beside
//! the files lists the parameters, the run configuration and the SHA-256 of
//! every file.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{vector_projection_error, ModeTruncation, SnapshotEnsemble, TimeSegments, TrajectoryEnsemble};
use crate::cavity::{self, CavityProblem, CavityTrajectory};
use crate::elliptic::{self, BasisScheme, EllipticProblem, ReducedEllipticModel, ReducedMethod, SolverSettings, SubdomainSpectra};
use crate::error::{Error, Result};
use crate::numerics::{norm2, svd, CsrMatrix, DenseMatrix};
use crate::parallel::Exec;
use crate::sampling::{
    references_by_distance, uniform_grid, ParameterDomain, ParameterPoint, WeightingKernel,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const ARMS_VERSION: u32 = 1;
pub const RNG_ID: &str = "pcg32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Elliptic,
    Cavity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
}

impl DomainSpec {
    pub fn domain(&self) -> Result<ParameterDomain> {
        let scale = self.scale.clone().unwrap_or_else(|| vec![1.0; self.lower.len()]);
        ParameterDomain::new(self.lower.clone(), self.upper.clone(), scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticSpec {
    pub grid_n: usize,
    /// DEIM points; `2k` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    pub lrm_neighbors: usize,
    pub full: SolverSettings,
    pub reference: SolverSettings,
    pub reduced: SolverSettings,
    /// Iterations per timing loop for the reduced solvers.
    pub timing_iterations: usize,
}

impl Default for EllipticSpec {
    fn default() -> Self {
        EllipticSpec {
            grid_n: elliptic::DEFAULT_GRID,
            m: None,
            lrm_neighbors: 9,
            full: SolverSettings::full(),
            reference: SolverSettings {
                tol: 1e-12,
                max_iter: 100,
            },
            reduced: SolverSettings::reduced(),
            timing_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavitySpec {
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_every: usize,
    pub segments: usize,
    pub overlap: f64,
    pub truncation: ModeTruncation,
}

impl Default for CavitySpec {
    fn default() -> Self {
        CavitySpec {
            nx: 129,
            ny: 129,
            dt: 2e-3,
            t_end: 50.0,
            snapshot_every: 25,
            segments: 10,
            overlap: 1.0,
            truncation: ModeTruncation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k: Vec<usize>,
    pub sigma: Vec<f64>,
}

/// Everything a run needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemKind,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainSpec,
    /// Training grid points per parameter axis.
    pub training: Vec<usize>,
    pub kernel: WeightingKernel,
    pub k: usize,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub test_count: usize,
    #[serde(default = "yes")]
    pub record_timing: bool,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub elliptic: EllipticSpec,
    #[serde(default)]
    pub cavity: CavitySpec,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let domain = self.domain.domain().map_err(|e| Error::Config(e.to_string()))?;
        if domain.dim() != 2 || self.training.len() != 2 {
            return bad("both problems have two parameters".into());
        }
        if self.training.iter().any(|&c| c == 0) {
            return bad("training counts must be positive".into());
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.sweep.k.iter().any(|&k| k == 0) || self.sweep.sigma.iter().any(|&s| !(s > 0.0)) {
            return bad("sweep values must be positive".into());
        }
        for m in &self.methods {
            if !m.applies_to(self.problem) {
                return bad(format!("method {m} does not apply to this problem"));
            }
        }
        match self.problem {
            ProblemKind::Elliptic => {
                if self.elliptic.grid_n == 0 {
                    return bad("grid_n must be positive".into());
                }
            }
            ProblemKind::Cavity => {
                let c = &self.cavity;
                if c.nx < 3 || c.ny < 3 || !(c.dt > 0.0) || !(c.t_end > 0.0) {
                    return bad("invalid cavity grid or time span".into());
                }
                if c.snapshot_every == 0 || c.segments == 0 || c.overlap < 0.0 {
                    return bad("invalid cavity snapshot or segment settings".into());
                }
            }
        }
        Ok(())
    }

    pub fn parameter_domain(&self) -> Result<ParameterDomain> {
        self.domain.domain()
    }

    pub fn store_dir(&self) -> PathBuf {
        self.out_dir.join("store")
    }

    pub fn deim_m(&self, k: usize) -> usize {
        self.elliptic.m.unwrap_or(2 * k)
    }

    pub fn ks(&self) -> Vec<usize> {
        if self.sweep.k.is_empty() {
            vec![self.k]
        } else {
            self.sweep.k.clone()
        }
    }

    /// Kernels to sweep for the adaptive methods.
    pub fn kernels(&self) -> Vec<WeightingKernel> {
        if self.sweep.sigma.is_empty() {
            vec![self.kernel]
        } else {
            self.sweep
                .sigma
                .iter()
                .map(|&s| match self.kernel {
                    WeightingKernel::Compact { .. } => WeightingKernel::Compact { epsilon: s },
                    _ => WeightingKernel::Gaussian { sigma: s },
                })
                .collect()
        }
    }

    pub fn methods_or_default(&self) -> Vec<Method> {
        if !self.methods.is_empty() {
            return self.methods.clone();
        }
        match self.problem {
            ProblemKind::Elliptic => vec![
                Method::Reduced(Family::Arm, ReducedMethod::Chord),
                Method::Reduced(Family::Arm, ReducedMethod::Newton),
                Method::Projection,
            ],
            ProblemKind::Cavity => vec![Method::Galerkin(Family::Arm), Method::Galerkin(Family::Grm)],
        }
    }
}

/// Default configuration for a problem.
pub fn default_config(problem: ProblemKind, out_dir: PathBuf) -> RunConfig {
    match problem {
        ProblemKind::Elliptic => RunConfig {
            schema_version: SCHEMA_VERSION,
            problem,
            out_dir,
            seed: 1,
            domain: DomainSpec {
                lower: vec![0.01, 0.01],
                upper: vec![10.0, 10.0],
                scale: None,
            },
            training: vec![11, 11],
            kernel: WeightingKernel::Gaussian { sigma: 2.0 },
            k: 10,
            methods: Vec::new(),
            test_count: 200,
            record_timing: true,
            sweep: SweepSpec::default(),
            elliptic: EllipticSpec::default(),
            cavity: CavitySpec::default(),
        },
        ProblemKind::Cavity => RunConfig {
            schema_version: SCHEMA_VERSION,
            problem,
            out_dir,
            seed: 1,
            domain: DomainSpec {
                lower: vec![500.0, 0.75],
                upper: vec![1700.0, 1.25],
                scale: Some(vec![2000.0, 1.0]),
            },
            training: vec![6, 5],
            kernel: WeightingKernel::Gaussian { sigma: 0.01 },
            k: 20,
            methods: Vec::new(),
            test_count: 100,
            record_timing: true,
            sweep: SweepSpec::default(),
            elliptic: EllipticSpec::default(),
            cavity: CavitySpec::default(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Grm,
    Lrm,
    Arm,
}

/// A reduced method by name: `grm|lrm|arm-chord`, `…-newton`,
/// `arm|grm-galerkin`, or `projection`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Reduced(Family, ReducedMethod),
    Galerkin(Family),
    Projection,
}

impl Method {
    pub fn applies_to(&self, problem: ProblemKind) -> bool {
        match self {
            Method::Galerkin(Family::Lrm) => false,
            Method::Galerkin(_) => problem == ProblemKind::Cavity,
            _ => problem == ProblemKind::Elliptic,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = |x: &Family| match x {
            Family::Grm => "grm",
            Family::Lrm => "lrm",
            Family::Arm => "arm",
        };
        match self {
            Method::Reduced(a, m) => write!(f, "{}-{}", fam(a), m.name()),
            Method::Galerkin(a) => write!(f, "{}-galerkin", fam(a)),
            Method::Projection => write!(f, "projection"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "projection" {
            return Ok(Method::Projection);
        }
        let (fam, solver) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))?;
        let fam = match fam {
            "grm" => Family::Grm,
            "lrm" => Family::Lrm,
            "arm" => Family::Arm,
            _ => return Err(Error::Config(format!("unknown method family in {s:?}"))),
        };
        match solver {
            "chord" => Ok(Method::Reduced(fam, ReducedMethod::Chord)),
            "newton" => Ok(Method::Reduced(fam, ReducedMethod::Newton)),
            "galerkin" if fam != Family::Lrm => Ok(Method::Galerkin(fam)),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses `"a,b"` into a parameter point.
pub fn parse_mu(s: &str) -> Result<ParameterPoint> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("bad parameter {s:?}: {e}")))?;
    ParameterPoint::new(v).map_err(|e| Error::Config(e.to_string()))
}

// ---------------------------------------------------------------------------
// .arms files

pub fn encode_arms(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.as_slice().len());
    out.extend_from_slice(b"ARMS");
    out.extend_from_slice(&ARMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_arms(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 24 || &bytes[..4] != b"ARMS" {
        return Err(Error::Format("missing ARMS header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ARMS_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    if bytes.len() != 24 + 8 * count {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            8 * count,
            bytes.len() - 24
        )));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    DenseMatrix::from_col_major(rows, cols, data)
}

pub fn write_arms(path: &Path, m: &DenseMatrix) -> Result<String> {
    let bytes = encode_arms(m);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_arms(path: &Path) -> Result<DenseMatrix> {
    decode_arms(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// snapshot store

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub rows: u64,
    pub cols: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailedPoint {
    pub mu: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub problem: ProblemKind,
    pub rng: String,
    pub params: Vec<Vec<f64>>,
    #[serde(default)]
    pub failed: Vec<FailedPoint>,
    pub files: Vec<FileEntry>,
    pub config: RunConfig,
}

/// In-memory contents of a snapshot store.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    pub config: RunConfig,
    pub params: Vec<ParameterPoint>,
    pub failed: Vec<FailedPoint>,
    /// Named matrices, written in name order.
    pub matrices: BTreeMap<String, DenseMatrix>,
}

const MANIFEST: &str = "manifest.toml";

fn params_matrix(params: &[ParameterPoint]) -> Result<DenseMatrix> {
    let cols: Vec<Vec<f64>> = params.iter().map(|p| p.0.clone()).collect();
    DenseMatrix::from_columns(params.first().map_or(0, |p| p.dim()), &cols)
}

fn encode_pattern(j: &CsrMatrix) -> DenseMatrix {
    let data: Vec<f64> = j
        .row_ptr()
        .iter()
        .chain(j.col_idx())
        .map(|&x| x as f64)
        .collect();
    let len = data.len();
    DenseMatrix::from_col_major(len, 1, data).expect("column vector")
}

fn decode_pattern(m: &DenseMatrix, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let v = m.col(0);
    if v.len() < n + 1 {
        return Err(Error::Format("Jacobian pattern too short".into()));
    }
    let to_idx = |x: &f64| x.round() as usize;
    Ok((v[..=n].iter().map(to_idx).collect(), v[n + 1..].iter().map(to_idx).collect()))
}

impl SnapshotStore {
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (name, m) in &self.matrices {
            let sha256 = write_arms(&dir.join(name), m)?;
            files.push(FileEntry {
                name: name.clone(),
                sha256,
                rows: m.rows() as u64,
                cols: m.cols() as u64,
            });
        }
        let manifest = Manifest {
            format_version: ARMS_VERSION,
            problem: self.config.problem,
            rng: RNG_ID.into(),
            params: self.params.iter().map(|p| p.0.clone()).collect(),
            failed: self.failed.clone(),
            files,
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::Config(format!("no snapshot store in {}: {e}", dir.display())))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut matrices = BTreeMap::new();
        for f in &manifest.files {
            let bytes = fs::read(dir.join(&f.name))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Format(format!("checksum mismatch for {}", f.name)));
            }
            let m = decode_arms(&bytes)?;
            if (m.rows() as u64, m.cols() as u64) != (f.rows, f.cols) {
                return Err(Error::Format(format!("shape mismatch for {}", f.name)));
            }
            matrices.insert(f.name.clone(), m);
        }
        let params = manifest
            .params
            .iter()
            .map(|p| ParameterPoint::new(p.clone()))
            .collect::<Result<_>>()?;
        Ok(SnapshotStore {
            config: manifest.config,
            params,
            failed: manifest.failed,
            matrices,
        })
    }

    fn matrix(&self, name: &str) -> Result<&DenseMatrix> {
        self.matrices
            .get(name)
            .ok_or_else(|| Error::Format(format!("store lacks {name}")))
    }

    /// Elliptic ensemble with nonlinear snapshots and Jacobians.
    pub fn elliptic_ensemble(&self) -> Result<SnapshotEnsemble> {
        if self.config.problem != ProblemKind::Elliptic {
            return Err(Error::Config("store does not hold an elliptic ensemble".into()));
        }
        let states = self.matrix("states.arms")?.clone();
        let n = states.rows();
        let mut ens = SnapshotEnsemble::new(self.params.clone(), states)?
            .with_nonlinear(self.matrix("nonlinear.arms")?.clone())?;
        if let (Ok(pat), Ok(vals)) = (self.matrix("jacobian_pattern.arms"), self.matrix("jacobians.arms")) {
            let (row_ptr, col_idx) = decode_pattern(pat, n)?;
            let js = (0..vals.cols())
                .map(|c| CsrMatrix::new(n, n, row_ptr.clone(), col_idx.clone(), vals.col(c).to_vec()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Format(e.to_string()))?;
            ens = ens.with_jacobians(js)?;
        }
        Ok(ens)
    }

    /// Cavity training trajectories.
    pub fn cavity_trajectories(&self) -> Result<Vec<CavityTrajectory>> {
        if self.config.problem != ProblemKind::Cavity {
            return Err(Error::Config("store does not hold cavity trajectories".into()));
        }
        let times = self.matrix("times.arms")?.col(0).to_vec();
        let base = cavity_problem(&self.config)?;
        self.params
            .iter()
            .enumerate()
            .map(|(i, mu)| {
                let snaps = self.matrix(&format!("trajectory_{i:04}.arms"))?.clone();
                let p = base.at(mu)?;
                let last = snaps.col(snaps.cols() - 1).to_vec();
                Ok(CavityTrajectory {
                    param: mu.clone(),
                    times: times.clone(),
                    final_state: cavity::CavityState::from_interior(&p, &last, *times.last().unwrap_or(&0.0)),
                    snapshots: snaps,
                })
            })
            .collect()
    }
}

fn elliptic_template(cfg: &RunConfig) -> Result<EllipticProblem> {
    EllipticProblem::new(cfg.elliptic.grid_n, ParameterPoint(vec![1.0, 1.0]))
}

fn cavity_problem(cfg: &RunConfig) -> Result<CavityProblem> {
    let c = &cfg.cavity;
    CavityProblem::new(c.nx, c.ny, 1.0, 1000.0, c.dt)
}

/// Full-model solves at the training grid; persisted under `out_dir/store`.
pub fn offline(cfg: &RunConfig, exec: Exec) -> Result<SnapshotStore> {
    cfg.validate()?;
    let domain = cfg.parameter_domain()?;
    let params = uniform_grid(&domain, &cfg.training)?;
    let store = match cfg.problem {
        ProblemKind::Elliptic => {
            let build = elliptic::generate_ensemble(&elliptic_template(cfg)?, &params, cfg.elliptic.full, exec)?;
            let ens = build.ensemble;
            let mut matrices = BTreeMap::new();
            matrices.insert("params.arms".to_string(), params_matrix(&ens.params)?);
            matrices.insert("states.arms".to_string(), ens.states.clone());
            matrices.insert("nonlinear.arms".to_string(), ens.nonlinear.clone().expect("nonlinear"));
            let js = ens.jacobians.as_ref().expect("jacobians");
            matrices.insert("jacobian_pattern.arms".to_string(), encode_pattern(&js[0]));
            let vals: Vec<Vec<f64>> = js.iter().map(|j| j.values().to_vec()).collect();
            matrices.insert("jacobians.arms".to_string(), DenseMatrix::from_columns(js[0].nnz(), &vals)?);
            SnapshotStore {
                config: cfg.clone(),
                params: ens.params,
                failed: failed_points(build.failed),
                matrices,
            }
        }
        ProblemKind::Cavity => {
            let base = cavity_problem(cfg)?;
            let c = &cfg.cavity;
            let runs = exec.map_slice(&params, |mu| {
                base.at(mu).and_then(|p| cavity::simulate(&p, c.t_end, c.snapshot_every))
            });
            let mut matrices = BTreeMap::new();
            let mut kept = Vec::new();
            let mut failed = Vec::new();
            let mut times = None;
            for (mu, r) in params.iter().zip(runs) {
                match r {
                    Ok(t) => {
                        matrices.insert(format!("trajectory_{:04}.arms", kept.len()), t.snapshots);
                        times.get_or_insert(t.times);
                        kept.push(mu.clone());
                    }
                    Err(e) => {
                        log::warn!("training run at {:?} failed: {e}", mu.0);
                        failed.push((mu.clone(), e.to_string()));
                    }
                }
            }
            let times = times.ok_or_else(|| Error::invalid("every training run failed"))?;
            let tl = times.len();
            matrices.insert("times.arms".to_string(), DenseMatrix::from_col_major(tl, 1, times)?);
            matrices.insert("params.arms".to_string(), params_matrix(&kept)?);
            SnapshotStore {
                config: cfg.clone(),
                params: kept,
                failed: failed_points(failed),
                matrices,
            }
        }
    };
    store.save(&cfg.store_dir())?;
    Ok(store)
}

fn failed_points(v: Vec<(ParameterPoint, String)>) -> Vec<FailedPoint> {
    v.into_iter()
        .map(|(mu, reason)| FailedPoint { mu: mu.0, reason })
        .collect()
}

fn check_store(cfg: &RunConfig, store: &SnapshotStore) -> Result<()> {
    if store.config.problem != cfg.problem {
        return Err(Error::Config("store was built for a different problem".into()));
    }
    let same_grid = match cfg.problem {
        ProblemKind::Elliptic => store.config.elliptic.grid_n == cfg.elliptic.grid_n,
        ProblemKind::Cavity => {
            let (a, b) = (&store.config.cavity, &cfg.cavity);
            (a.nx, a.ny, a.dt) == (b.nx, b.ny, b.dt) && a.t_end >= b.t_end
        }
    };
    if !same_grid {
        return Err(Error::Config("store grid does not match the configuration".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elliptic model cache

fn scheme_for(cfg: &RunConfig, family: Family, kernel: WeightingKernel) -> BasisScheme {
    match family {
        Family::Grm => BasisScheme::Global,
        Family::Lrm => BasisScheme::Local {
            neighbors: cfg.elliptic.lrm_neighbors,
        },
        Family::Arm => BasisScheme::Adaptive { kernel },
    }
}

/// Lazily computed spectra and models for one basis scheme.
struct ModelCache<'a> {
    ens: &'a SnapshotEnsemble,
    template: &'a EllipticProblem,
    domain: &'a ParameterDomain,
    spectra: Vec<Option<SubdomainSpectra>>,
    models: HashMap<(usize, usize, usize), ReducedEllipticModel>,
}

impl<'a> ModelCache<'a> {
    fn new(
        ens: &'a SnapshotEnsemble,
        template: &'a EllipticProblem,
        domain: &'a ParameterDomain,
        scheme: &BasisScheme,
        max_k: usize,
        max_m: usize,
        centers: &[usize],
        exec: Exec,
    ) -> Result<Self> {
        let mut spectra: Vec<Option<SubdomainSpectra>> = vec![None; ens.len()];
        if *scheme == BasisScheme::Global {
            for s in elliptic::spectra_all(ens, scheme, max_k, max_m, domain, exec)? {
                let c = s.center;
                spectra[c] = Some(s);
            }
        } else {
            let computed = exec.map_slice(centers, |&c| elliptic::subdomain_spectra(ens, scheme, c, max_k, max_m, domain));
            for (&c, s) in centers.iter().zip(computed) {
                spectra[c] = Some(s?);
            }
        }
        Ok(ModelCache {
            ens,
            template,
            domain,
            spectra,
            models: HashMap::new(),
        })
    }

    fn model(&mut self, center: usize, k: usize, m: usize) -> Result<&ReducedEllipticModel> {
        if !self.models.contains_key(&(center, k, m)) {
            let s = self.spectra[center]
                .as_ref()
                .ok_or_else(|| Error::invalid("subdomain spectrum not prepared"))?;
            let model = s.model(self.ens, self.template, k, m, self.domain)?;
            self.models.insert((center, k, m), model);
        }
        Ok(&self.models[&(center, k, m)])
    }

    /// Up to two usable subdomains in order of distance: the chord solver
    /// falls back to the second when the first does not converge.
    fn candidates(&mut self, order: &[usize], k: usize, m: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(2);
        for &c in order {
            if out.len() == 2 {
                break;
            }
            if self.spectra[c].is_some() && !self.model(c, k, m)?.constant_flag {
                out.push(c);
            }
        }
        if out.is_empty() {
            return Err(Error::NoValidSubdomain);
        }
        Ok(out)
    }

    fn get(&self, center: usize, k: usize, m: usize) -> &ReducedEllipticModel {
        &self.models[&(center, k, m)]
    }
}

// ---------------------------------------------------------------------------
// online

#[derive(Debug, Clone, Serialize)]
pub struct OnlineReport {
    pub problem: ProblemKind,
    pub method: String,
    pub mu: Vec<f64>,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subdomain: Option<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub online_time_s: f64,
    pub full_time_s: f64,
    pub rel_error: f64,
}

fn kernel_sigma(family: Family, kernel: &WeightingKernel) -> Option<f64> {
    (family == Family::Arm).then(|| kernel.width())
}

/// Runs one method at `mu`, writes `solution.arms`, `error.arms`,
/// `report.toml` (and `centerline.csv` for the cavity) to `out`.
pub fn online(cfg: &RunConfig, mu: &ParameterPoint, method: Method, out: &Path) -> Result<OnlineReport> {
    cfg.validate()?;
    if !method.applies_to(cfg.problem) {
        return Err(Error::Config(format!("method {method} does not apply to this problem")));
    }
    let store = SnapshotStore::load(&cfg.store_dir())?;
    check_store(cfg, &store)?;
    let domain = cfg.parameter_domain()?;
    fs::create_dir_all(out)?;
    let report = match cfg.problem {
        ProblemKind::Elliptic => online_elliptic(cfg, &store, &domain, mu, method, out)?,
        ProblemKind::Cavity => online_cavity(cfg, &store, &domain, mu, method, out)?,
    };
    let text = toml::to_string(&report).map_err(|e| Error::Report(e.to_string()))?;
    fs::write(out.join("report.toml"), text)?;
    Ok(report)
}

fn online_elliptic(
    cfg: &RunConfig,
    store: &SnapshotStore,
    domain: &ParameterDomain,
    mu: &ParameterPoint,
    method: Method,
    out: &Path,
) -> Result<OnlineReport> {
    let ens = store.elliptic_ensemble()?;
    let template = elliptic_template(cfg)?;
    let p = template.at(mu.clone())?;
    let order = references_by_distance(mu, &ens.params, domain)?;
    let start_full = Instant::now();
    let reference = elliptic::newton_solve_full(&p, ens.states.col(order[0]), cfg.elliptic.reference.tol, cfg.elliptic.reference.max_iter)?
        .require_converged()?;
    let full_time = start_full.elapsed().as_secs_f64();
    let k = cfg.k;
    let m = cfg.deim_m(k);
    let (family, solver) = match method {
        Method::Reduced(f, s) => (f, Some(s)),
        Method::Projection => (Family::Arm, None),
        Method::Galerkin(_) => unreachable!("checked by applies_to"),
    };
    let scheme = scheme_for(cfg, family, cfg.kernel);
    let mut cache = ModelCache::new(&ens, &template, domain, &scheme, k, m, &order[..order.len().min(2)], Exec::Sequential)?;
    let cs = cache.candidates(&order, k, m)?;
    let models: Vec<&ReducedEllipticModel> = cs.iter().map(|&c| cache.get(c, k, m)).collect();
    let model = models[0];
    let (solution, iterations, converged, online_time) = match solver {
        Some(s) => {
            let r = elliptic::solve_with_fallback(&models, mu, s, cfg.elliptic.reduced.tol, cfg.elliptic.reduced.max_iter)?;
            (r.solution, r.iterations, r.converged, r.wall_time.as_secs_f64())
        }
        None => {
            let phi = &model.basis.phi;
            (phi.matvec(&phi.t_matvec(&reference.solution)), 0, true, 0.0)
        }
    };
    let err: Vec<f64> = reference.solution.iter().zip(&solution).map(|(a, b)| a - b).collect();
    let n = solution.len();
    write_arms(&out.join("solution.arms"), &DenseMatrix::from_col_major(n, 1, solution)?)?;
    write_arms(&out.join("reference.arms"), &DenseMatrix::from_col_major(n, 1, reference.solution.clone())?)?;
    let rel = norm2(&err) / norm2(&reference.solution);
    write_arms(&out.join("error.arms"), &DenseMatrix::from_col_major(n, 1, err)?)?;
    Ok(OnlineReport {
        problem: cfg.problem,
        method: method.to_string(),
        mu: mu.0.clone(),
        k,
        m: Some(m),
        sigma: kernel_sigma(family, &cfg.kernel),
        subdomain: Some(cs[0]),
        iterations,
        converged,
        online_time_s: online_time,
        full_time_s: full_time,
        rel_error: rel,
    })
}

fn cavity_kernel(family: Family, kernel: WeightingKernel) -> WeightingKernel {
    match family {
        Family::Arm => kernel,
        _ => WeightingKernel::Uniform,
    }
}

struct CavityRun {
    rel_error: f64,
    steps: usize,
    online_time: f64,
    final_vorticity: Vec<f64>,
    final_psi: Vec<f64>,
}

fn run_cavity_rom(
    cfg: &RunConfig,
    p: &CavityProblem,
    training: &[CavityTrajectory],
    domain: &ParameterDomain,
    kernel: WeightingKernel,
    k: usize,
    reference: &[f64],
) -> Result<CavityRun> {
    let c = &cfg.cavity;
    let segments = TimeSegments::uniform(0.0, c.t_end, c.segments, c.overlap)?;
    let roms = cavity::build_segment_roms(p, training, &segments, kernel, k, &c.truncation, domain, Exec::default())?;
    let start = Instant::now();
    let tr = cavity::integrate_rom(&roms, &vec![0.0; k], (0.0, c.t_end), c.dt, c.snapshot_every)?;
    let online_time = start.elapsed().as_secs_f64();
    let last = tr.states.len() - 1;
    let rom = &roms[tr.active[last]];
    let w = rom.basis.lift(&tr.states[last]);
    let psi = p.embed(&rom.lift.matvec(&tr.states[last]));
    Ok(CavityRun {
        rel_error: cavity::relative_error(reference, &w),
        steps: ((c.t_end / c.dt).round()) as usize,
        online_time,
        final_vorticity: w,
        final_psi: psi,
    })
}

fn online_cavity(
    cfg: &RunConfig,
    store: &SnapshotStore,
    domain: &ParameterDomain,
    mu: &ParameterPoint,
    method: Method,
    out: &Path,
) -> Result<OnlineReport> {
    let family = match method {
        Method::Galerkin(f) => f,
        _ => unreachable!("checked by applies_to"),
    };
    let training = store.cavity_trajectories()?;
    let p = cavity_problem(cfg)?.at(mu)?;
    let start = Instant::now();
    let truth = cavity::simulate(&p, cfg.cavity.t_end, cfg.cavity.snapshot_every)?;
    let full_time = start.elapsed().as_secs_f64();
    let reference = truth.final_state.interior_omega(&p);
    let kernel = cavity_kernel(family, cfg.kernel);
    let run = run_cavity_rom(cfg, &p, &training, domain, kernel, cfg.k, &reference)?;
    let n = run.final_vorticity.len();
    write_arms(&out.join("solution.arms"), &DenseMatrix::from_col_major(n, 1, run.final_vorticity.clone())?)?;
    let err: Vec<f64> = reference.iter().zip(&run.final_vorticity).map(|(a, b)| a - b).collect();
    write_arms(&out.join("error.arms"), &DenseMatrix::from_col_major(n, 1, err)?)?;
    let full_u = cavity::centerline_u(&p, &truth.final_state.psi);
    let rom_u = cavity::centerline_u(&p, &run.final_psi);
    let mut w = csv::Writer::from_path(out.join("centerline.csv"))?;
    w.write_record(["y", "u_full", "u_rom"])?;
    for ((y, a), (_, b)) in full_u.iter().zip(&rom_u) {
        w.write_record([y.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(OnlineReport {
        problem: cfg.problem,
        method: method.to_string(),
        mu: mu.0.clone(),
        k: cfg.k,
        m: None,
        sigma: kernel_sigma(family, &kernel),
        subdomain: None,
        iterations: run.steps,
        converged: true,
        online_time_s: run.online_time,
        full_time_s: full_time,
        rel_error: run.rel_error,
    })
}

// ---------------------------------------------------------------------------
// bench

/// One row of the benchmark CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mu1: f64,
    pub mu2: f64,
    pub method: String,
    pub k: usize,
    pub sigma: Option<f64>,
    pub rel_error: f64,
    pub iters: usize,
    pub online_time_s: f64,
    pub full_time_s: f64,
    pub converged: bool,
}

/// Mean over the test parameters of one `(method, k, sigma)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub k: usize,
    pub sigma: Option<f64>,
    pub count: usize,
    pub failures: usize,
    pub mean_rel_error: f64,
    pub mean_iters: f64,
    pub mean_online_time_s: f64,
    pub mean_full_time_s: f64,
    /// Mean online time over mean full time.
    pub scaled_time: f64,
}

/// Test parameters drawn uniformly from the domain.
pub fn draw_test_parameters(domain: &ParameterDomain, count: usize, seed: u64) -> Vec<ParameterPoint> {
    let mut rng = Pcg32::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u: Vec<f64> = (0..domain.dim()).map(|_| rng.gen::<f64>()).collect();
            domain.from_unit(&u)
        })
        .collect()
}

pub fn aggregate(records: &[BenchRecord]) -> Vec<Aggregate> {
    let mut groups: Vec<(String, usize, Option<f64>, Vec<&BenchRecord>)> = Vec::new();
    for r in records {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.method && g.1 == r.k && g.2.map(f64::to_bits) == r.sigma.map(f64::to_bits))
        {
            Some(g) => g.3.push(r),
            None => groups.push((r.method.clone(), r.k, r.sigma, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(method, k, sigma, rs)| {
            let ok: Vec<&&BenchRecord> = rs.iter().filter(|r| r.converged).collect();
            let mean = |f: &dyn Fn(&BenchRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let on = mean(&|r| r.online_time_s);
            let full = mean(&|r| r.full_time_s);
            Aggregate {
                method,
                k,
                sigma,
                count: rs.len(),
                failures: rs.len() - ok.len(),
                mean_rel_error: mean(&|r| r.rel_error),
                mean_iters: mean(&|r| r.iters as f64),
                mean_online_time_s: on,
                mean_full_time_s: full,
                scaled_time: if full > 0.0 { on / full } else { 0.0 },
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Normalised singular values of the GRM matrix and the subdomain-average
/// of the ARM matrices, each curve scaled by its largest value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularValueRow {
    pub mode: usize,
    pub grm: f64,
    pub arm: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub aggregates: Vec<Aggregate>,
    pub singular_values: Vec<SingularValueRow>,
    pub files: Vec<PathBuf>,
}

/// Runs the configured methods on seeded random test parameters and writes
/// `bench.csv`, `aggregate.csv` and `singular_values.csv` to `out_dir`.
pub fn bench(cfg: &RunConfig, exec: Exec) -> Result<BenchOutcome> {
    cfg.validate()?;
    let store = SnapshotStore::load(&cfg.store_dir())?;
    check_store(cfg, &store)?;
    let domain = cfg.parameter_domain()?;
    let tests = draw_test_parameters(&domain, cfg.test_count, cfg.seed);
    let (records, singular_values) = match cfg.problem {
        ProblemKind::Elliptic => bench_elliptic(cfg, &store, &domain, &tests, exec)?,
        ProblemKind::Cavity => bench_cavity(cfg, &store, &domain, &tests, exec)?,
    };
    let aggregates = aggregate(&records);
    fs::create_dir_all(&cfg.out_dir)?;
    let files = vec![
        cfg.out_dir.join("bench.csv"),
        cfg.out_dir.join("aggregate.csv"),
        cfg.out_dir.join("singular_values.csv"),
    ];
    write_csv(&files[0], &records)?;
    write_csv(&files[1], &aggregates)?;
    write_csv(&files[2], &singular_values)?;
    Ok(BenchOutcome {
        records,
        aggregates,
        singular_values,
        files,
    })
}

fn normalized(s: &[f64]) -> Vec<f64> {
    let top = s.first().copied().unwrap_or(0.0);
    s.iter().map(|x| if top > 0.0 { x / top } else { 0.0 }).collect()
}

fn decay_rows(grm: &[f64], arm_curves: &[Vec<f64>]) -> Vec<SingularValueRow> {
    let len = grm.len().min(arm_curves.iter().map(|c| c.len()).min().unwrap_or(0));
    (0..len)
        .map(|i| SingularValueRow {
            mode: i + 1,
            grm: grm[i],
            arm: arm_curves.iter().map(|c| c[i]).sum::<f64>() / arm_curves.len() as f64,
        })
        .collect()
}

struct EllipticTest {
    mu: ParameterPoint,
    solution: Vec<f64>,
    order: Vec<usize>,
    full_time: f64,
}

fn bench_elliptic(
    cfg: &RunConfig,
    store: &SnapshotStore,
    domain: &ParameterDomain,
    tests: &[ParameterPoint],
    exec: Exec,
) -> Result<(Vec<BenchRecord>, Vec<SingularValueRow>)> {
    let ens = store.elliptic_ensemble()?;
    let template = elliptic_template(cfg)?;
    let refs = cfg.elliptic.reference;
    let truths = exec.map_slice(tests, |mu| -> Result<EllipticTest> {
        let p = template.at(mu.clone())?;
        let order = references_by_distance(mu, &ens.params, domain)?;
        let r = elliptic::newton_solve_full(&p, ens.states.col(order[0]), refs.tol, refs.max_iter)?.require_converged()?;
        let full_time = r.wall_time.as_secs_f64() / r.iterations.max(1) as f64;
        Ok(EllipticTest {
            mu: mu.clone(),
            solution: r.solution,
            order,
            full_time,
        })
    });
    let truths: Vec<EllipticTest> = truths.into_iter().collect::<Result<_>>()?;
    let ks = cfg.ks();
    let max_k = *ks.iter().max().expect("non-empty");
    let max_m = ks.iter().map(|&k| cfg.deim_m(k)).max().expect("non-empty");
    let methods = cfg.methods_or_default();
    let families: Vec<Family> = {
        let mut f: Vec<Family> = methods
            .iter()
            .map(|m| match m {
                Method::Reduced(f, _) => *f,
                _ => Family::Arm,
            })
            .collect();
        f.sort();
        f.dedup();
        f
    };
    // candidate centres: the two nearest per test covers the constant fallback
    let mut centers: Vec<usize> = truths.iter().flat_map(|t| t.order.iter().take(2).copied()).collect();
    centers.sort_unstable();
    centers.dedup();

    let mut records = Vec::new();
    for family in families {
        let kernels = if family == Family::Arm { cfg.kernels() } else { vec![cfg.kernel] };
        for kernel in kernels {
            let scheme = scheme_for(cfg, family, kernel);
            let mut cache = ModelCache::new(&ens, &template, domain, &scheme, max_k, max_m, &centers, exec)?;
            let sigma = kernel_sigma(family, &kernel);
            for &k in &ks {
                let m = cfg.deim_m(k);
                for t in &truths {
                    let cs = cache.candidates(&t.order, k, m)?;
                    let models: Vec<&ReducedEllipticModel> = cs.iter().map(|&c| cache.get(c, k, m)).collect();
                    let model = models[0];
                    let unorm = norm2(&t.solution);
                    for method in &methods {
                        let rec = |name: String, rel_error: f64, iters: usize, online: f64, converged: bool| BenchRecord {
                            mu1: t.mu.0[0],
                            mu2: t.mu.0[1],
                            method: name,
                            k,
                            sigma,
                            rel_error,
                            iters,
                            online_time_s: if cfg.record_timing { online } else { 0.0 },
                            full_time_s: if cfg.record_timing { t.full_time } else { 0.0 },
                            converged,
                        };
                        match *method {
                            Method::Reduced(f, solver) if f == family => {
                                let r = elliptic::solve_with_fallback(&models, &t.mu, solver, cfg.elliptic.reduced.tol, cfg.elliptic.reduced.max_iter)?;
                                let err: Vec<f64> = r.solution.iter().zip(&t.solution).map(|(a, b)| a - b).collect();
                                let online = if cfg.record_timing {
                                    let n = cfg.elliptic.timing_iterations.max(1);
                                    elliptic::time_reduced_iterations(model, &t.mu, solver, n)?.as_secs_f64() / n as f64
                                } else {
                                    0.0
                                };
                                records.push(rec(method.to_string(), norm2(&err) / unorm, r.iterations, online, r.converged));
                            }
                            Method::Projection if family == Family::Arm => {
                                let e = vector_projection_error(&model.basis.phi, &t.solution) / unorm;
                                records.push(rec(method.to_string(), e, 0, 0.0, true));
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    // singular-value decay: GRM vs ARM averaged over subdomains
    let grm = normalized(&svd(&ens.states)?.sigma);
    let arm_spec = elliptic::spectra_all(&ens, &BasisScheme::Adaptive { kernel: cfg.kernel }, 1, 1, domain, exec)?;
    let arm: Vec<Vec<f64>> = arm_spec.iter().map(|s| normalized(&s.states.singular_values)).collect();
    Ok((records, decay_rows(&grm, &arm)))
}

fn bench_cavity(
    cfg: &RunConfig,
    store: &SnapshotStore,
    domain: &ParameterDomain,
    tests: &[ParameterPoint],
    exec: Exec,
) -> Result<(Vec<BenchRecord>, Vec<SingularValueRow>)> {
    let training = store.cavity_trajectories()?;
    let base = cavity_problem(cfg)?;
    let c = &cfg.cavity;
    let methods = cfg.methods_or_default();
    let outcomes = exec.map_slice(tests, |mu| -> Result<Vec<BenchRecord>> {
        let p = base.at(mu)?;
        let start = Instant::now();
        let truth = cavity::simulate(&p, c.t_end, c.snapshot_every)?;
        let full_time = start.elapsed().as_secs_f64();
        let reference = truth.final_state.interior_omega(&p);
        let mut out = Vec::new();
        for method in &methods {
            let family = match method {
                Method::Galerkin(f) => *f,
                _ => continue,
            };
            let kernels = if family == Family::Arm { cfg.kernels() } else { vec![WeightingKernel::Uniform] };
            for kernel in kernels {
                for &k in &cfg.ks() {
                    let (rel_error, iters, online, converged) =
                        match run_cavity_rom(cfg, &p, &training, domain, kernel, k, &reference) {
                            Ok(r) => (r.rel_error, r.steps, r.online_time, r.rel_error.is_finite()),
                            Err(e) => {
                                log::warn!("{method} at {:?} (k = {k}) failed: {e}", mu.0);
                                (f64::NAN, 0, 0.0, false)
                            }
                        };
                    out.push(BenchRecord {
                        mu1: mu.0[0],
                        mu2: mu.0[1],
                        method: method.to_string(),
                        k,
                        sigma: kernel_sigma(family, &kernel),
                        rel_error,
                        iters,
                        online_time_s: if cfg.record_timing { online } else { 0.0 },
                        full_time_s: if cfg.record_timing { full_time } else { 0.0 },
                        converged,
                    });
                }
            }
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for o in outcomes {
        records.extend(o?);
    }
    Ok((records, cavity_decay(cfg, &training, domain)?))
}

/// Information-matrix singular values on the first segment: uniform weights
/// against the kernel weights averaged over all training centres.
fn cavity_decay(cfg: &RunConfig, training: &[CavityTrajectory], domain: &ParameterDomain) -> Result<Vec<SingularValueRow>> {
    let c = &cfg.cavity;
    let segments = TimeSegments::uniform(0.0, c.t_end, c.segments, c.overlap)?;
    let (lo, hi) = segments.data[0];
    let params: Vec<ParameterPoint> = training.iter().map(|t| t.param.clone()).collect();
    let pieces = training
        .iter()
        .map(|t| crate::basis::segment_trajectories(&t.snapshots, &t.times, &[(lo, hi)]).map(|mut v| v.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let ens = TrajectoryEnsemble::new(params, pieces, &c.truncation)?;
    let grm = normalized(&svd(&crate::basis::information_matrix(&ens, 0, WeightingKernel::Uniform, domain)?)?.sigma);
    let arm = (0..ens.params.len())
        .map(|i| Ok(normalized(&svd(&crate::basis::information_matrix(&ens, i, cfg.kernel, domain)?)?.sigma)))
        .collect::<Result<Vec<_>>>()?;
    Ok(decay_rows(&grm, &arm))
}

// ---------------------------------------------------------------------------
// report

fn read_records(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    for h in ["mu1", "mu2", "method", "k", "sigma", "rel_error", "iters", "online_time_s", "full_time_s"] {
        if !headers.iter().any(|x| x == h) {
            return Err(Error::Report(format!("{} lacks column {h}", path.display())));
        }
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Report(e.to_string())).map(|mut rec: ReportRow| {
                rec.converged.get_or_insert(true);
                BenchRecord {
                    mu1: rec.mu1,
                    mu2: rec.mu2,
                    method: rec.method,
                    k: rec.k,
                    sigma: rec.sigma,
                    rel_error: rec.rel_error,
                    iters: rec.iters,
                    online_time_s: rec.online_time_s,
                    full_time_s: rec.full_time_s,
                    converged: rec.converged.unwrap_or(true),
                }
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct ReportRow {
    mu1: f64,
    mu2: f64,
    method: String,
    k: usize,
    sigma: Option<f64>,
    rel_error: f64,
    iters: usize,
    online_time_s: f64,
    full_time_s: f64,
    converged: Option<bool>,
}

fn fmt_sigma(s: Option<f64>) -> String {
    s.map_or_else(|| "-".to_string(), |x| format!("{x}"))
}

/// Markdown table of `value` with rows `k` and columns `sigma`, per method.
fn table(aggs: &[Aggregate], title: &str, value: impl Fn(&Aggregate) -> f64) -> String {
    let mut methods: Vec<&str> = aggs.iter().map(|a| a.method.as_str()).collect();
    methods.dedup();
    let mut seen = HashSet::new();
    methods.retain(|m| seen.insert(*m));
    let mut out = String::new();
    for m in methods {
        let cells: Vec<&Aggregate> = aggs.iter().filter(|a| a.method == m).collect();
        let mut sigmas: Vec<Option<f64>> = Vec::new();
        let mut ks: Vec<usize> = Vec::new();
        for a in &cells {
            if !sigmas.iter().any(|s| s.map(f64::to_bits) == a.sigma.map(f64::to_bits)) {
                sigmas.push(a.sigma);
            }
            if !ks.contains(&a.k) {
                ks.push(a.k);
            }
        }
        ks.sort_unstable();
        out.push_str(&format!("### {title}: {m}\n\n| k |"));
        for s in &sigmas {
            out.push_str(&format!(" σ = {} |", fmt_sigma(*s)));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(sigmas.len()));
        out.push('\n');
        for k in ks {
            out.push_str(&format!("| {k} |"));
            for s in &sigmas {
                let v = cells
                    .iter()
                    .find(|a| a.k == k && a.sigma.map(f64::to_bits) == s.map(f64::to_bits))
                    .map(|a| value(a));
                match v {
                    Some(x) => out.push_str(&format!(" {x:.2E} |")),
                    None => out.push_str(" |"),
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Formats bench CSVs into Markdown tables (`report.md`) and copies the
/// singular-value curves found beside them into `out`.
pub fn report(csv_paths: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if csv_paths.is_empty() {
        return Err(Error::Report("no bench CSV given".into()));
    }
    let mut records = Vec::new();
    for p in csv_paths {
        records.extend(read_records(p)?);
    }
    let aggs = aggregate(&records);
    fs::create_dir_all(out)?;
    let mut md = String::from("# Benchmark report\n\n");
    md.push_str(&table(&aggs, "Mean relative error", |a| a.mean_rel_error));
    md.push_str(&table(&aggs, "Scaled running time", |a| a.scaled_time));
    let mut written = vec![out.join("report.md")];
    fs::write(&written[0], md)?;
    let agg_path = out.join("report_aggregate.csv");
    write_csv(&agg_path, &aggs)?;
    written.push(agg_path);
    for (i, p) in csv_paths.iter().enumerate() {
        let sv = p.with_file_name("singular_values.csv");
        if sv.exists() {
            let mut r = csv::Reader::from_path(&sv)?;
            let rows: Vec<SingularValueRow> = r
                .deserialize()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Report(format!("{}: {e}", sv.display())))?;
            let dst = out.join(format!("singular_values_{i}.csv"));
            write_csv(&dst, &rows)?;
            written.push(dst);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for s in ["arm-chord", "grm-newton", "lrm-chord", "arm-galerkin", "grm-galerkin", "projection"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("lrm-galerkin".parse::<Method>().is_err());
        assert!("arm-fast".parse::<Method>().is_err());
    }

    #[test]
    fn arms_round_trip_is_bit_exact() {
        let m = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 - j as f64) / 7.0 + f64::EPSILON);
        let bytes = encode_arms(&m);
        assert_eq!(&bytes[..4], b"ARMS");
        assert_eq!(bytes.len(), 24 + 48);
        let back = decode_arms(&bytes).unwrap();
        assert_eq!(encode_arms(&back), bytes);
        assert!(decode_arms(&bytes[..30]).is_err());
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = default_config(ProblemKind::Elliptic, PathBuf::from("out"));
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn test_parameters_are_seeded() {
        let d = ParameterDomain::elliptic_default();
        let a = draw_test_parameters(&d, 5, 3);
        assert_eq!(a, draw_test_parameters(&d, 5, 3));
        assert_ne!(a, draw_test_parameters(&d, 5, 4));
        assert!(a.iter().all(|p| d.contains(p)));
    }

    #[test]
    fn rank_one_decay_curve() {
        let m = DenseMatrix::from_fn(4, 3, |i, j| (i + 1) as f64 * (j + 1) as f64);
        let c = normalized(&svd(&m).unwrap().sigma);
        assert_eq!(c[0], 1.0);
        assert!(c[1] < 1e-12 && c[2] < 1e-12);
    }

    #[test]
    fn missing_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "mu1,mu2,method\n1,2,arm-chord\n").unwrap();
        assert!(matches!(report(&[p], dir.path()), Err(Error::Report(_))));
    }
}
