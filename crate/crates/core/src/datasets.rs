//! Event-matrix datasets: file I/O, partitioning, normalization, and a
//! synthetic ground-pattern generator for desk-scale experiments.
//!
//! An event is an H x W grid of non-negative station signals; grid positions
//! whose station centre falls outside the circular array are exactly zero.
//! The EVT text format is one event per line after a `EVT1 <h> <w>` header;
//! `#` lines between the header and the events carry metadata (geometry and
//! generator parameters) and survive a save/load round trip. A binary
//! variant (`EVTB`) stores the same payload with little-endian 32-bit
//! headers and raw f32 grids.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: magic mismatch (expected EVT1 or EVTB)")]
    BadMagic { path: String },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("line {line}: label {value} outside {{0,1}}")]
    BadLabel { line: usize, value: i64 },
    #[error("line {line}: partition {value} outside 0..=3")]
    BadPartition { line: usize, value: i64 },
    #[error("line {line}: {0}", .reason)]
    Malformed { line: usize, reason: String },
    #[error("partition empty: {0}")]
    EmptyPartition(&'static str),
    #[error("partition {0} missing class {1}")]
    MissingClass(&'static str, ClassLabel),
    #[error("negative signal {value} at line {line}")]
    NegativeSignal { line: usize, value: f32 },
}

/// Event class. Proton is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Gamma,
    Proton,
}

impl ClassLabel {
    pub fn code(self) -> u8 {
        match self {
            ClassLabel::Gamma => 0,
            ClassLabel::Proton => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(ClassLabel::Gamma),
            1 => Some(ClassLabel::Proton),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Gamma => write!(f, "gamma"),
            ClassLabel::Proton => write!(f, "proton"),
        }
    }
}

pub const PARTITION_NAMES: [&str; 4] = ["train", "validation", "test", "generalisation"];

/// Detector layout: grid dimensions, physical cell size, array radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub cell_h: f64,
    pub cell_w: f64,
    pub radius: f64,
}

impl Geometry {
    /// Full-scale array: 100 x 45 cells of 1.5 m x 3 m, radius 80 m.
    pub fn full_scale() -> Self {
        Geometry {
            height: 100,
            width: 45,
            cell_h: 1.5,
            cell_w: 3.0,
            radius: 80.0,
        }
    }

    /// Desk-scale default: 24 x 24 coarser cells covering a similar radius,
    /// so distance-based statistics (e.g. the 40 m ring) stay meaningful.
    pub fn desk_scale() -> Self {
        Geometry {
            height: 24,
            width: 24,
            cell_h: 6.5,
            cell_w: 6.5,
            radius: 75.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Physical centre of cell (row, col), array centre at the origin.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 + 0.5 - self.width as f64 / 2.0) * self.cell_w;
        let y = (row as f64 + 0.5 - self.height as f64 / 2.0) * self.cell_h;
        (x, y)
    }

    pub fn in_array(&self, row: usize, col: usize) -> bool {
        let (x, y) = self.cell_center(row, col);
        x * x + y * y <= self.radius * self.radius
    }
}

/// One shower event: row-major signal grid plus its class.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMatrix {
    pub grid: Vec<f32>,
    pub label: ClassLabel,
}

/// All four partitions plus the geometry and preserved metadata lines.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<EventMatrix>,
    pub validation: Vec<EventMatrix>,
    pub test: Vec<EventMatrix>,
    pub generalisation: Vec<EventMatrix>,
    pub geometry: Geometry,
    pub meta: Vec<String>,
}

impl DatasetBundle {
    pub fn partition(&self, name: &str) -> Option<&[EventMatrix]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            "generalisation" => Some(&self.generalisation),
            _ => None,
        }
    }

    pub fn partitions(&self) -> [(&'static str, &[EventMatrix]); 4] {
        [
            ("train", self.train.as_slice()),
            ("validation", self.validation.as_slice()),
            ("test", self.test.as_slice()),
            ("generalisation", self.generalisation.as_slice()),
        ]
    }

    fn check(&self) -> Result<(), DataError> {
        for (name, events) in self.partitions() {
            if events.is_empty() {
                return Err(DataError::EmptyPartition(match name {
                    "train" => "train",
                    "validation" => "validation",
                    "test" => "test",
                    _ => "generalisation",
                }));
            }
            for class in [ClassLabel::Gamma, ClassLabel::Proton] {
                if !events.iter().any(|e| e.label == class) {
                    return Err(DataError::MissingClass(
                        match name {
                            "train" => "train",
                            "validation" => "validation",
                            "test" => "test",
                            _ => "generalisation",
                        },
                        class,
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-cell mean and standard deviation fitted on the training partition.
/// Standard deviations below 1e-12 are floored to 1 so dead cells map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f64 = 1e-12;

pub fn fit_norm(train: &[EventMatrix]) -> NormStats {
    assert!(!train.is_empty(), "fit_norm on empty partition");
    let cells = train[0].grid.len();
    let n = train.len() as f64;
    let mut mean = vec![0f64; cells];
    for event in train {
        for (m, &v) in mean.iter_mut().zip(&event.grid) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0f64; cells];
    for event in train {
        for ((s, &v), m) in var.iter_mut().zip(&event.grid).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd as f32
            }
        })
        .collect();
    NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std,
    }
}

pub fn apply_norm(stats: &NormStats, events: &[EventMatrix]) -> Vec<EventMatrix> {
    events
        .iter()
        .map(|event| EventMatrix {
            grid: event
                .grid
                .iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect(),
            label: event.label,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// EVT file format
// ---------------------------------------------------------------------------

fn format_f32(v: f32) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:?}")
    }
}

/// Serialize to EVT text. The output is canonical: loading and saving it
/// again reproduces the bytes exactly.
pub fn save_events_text(bundle: &DatasetBundle) -> String {
    let mut out = format!("EVT1 {} {}\n", bundle.geometry.height, bundle.geometry.width);
    for meta in &bundle.meta {
        out.push_str(meta);
        out.push('\n');
    }
    for (idx, (_, events)) in bundle.partitions().iter().enumerate() {
        for event in *events {
            out.push_str(&format!("{} {}", idx, event.label.code()));
            for &v in &event.grid {
                out.push(' ');
                out.push_str(&format_f32(v));
            }
            out.push('\n');
        }
    }
    out
}

/// Serialize to the EVTB binary variant.
pub fn save_events_binary(bundle: &DatasetBundle) -> Vec<u8> {
    let n: usize = bundle.partitions().iter().map(|(_, e)| e.len()).sum();
    let mut out = Vec::with_capacity(16 + n * (2 + bundle.geometry.cells() * 4));
    out.extend_from_slice(b"EVTB");
    out.extend_from_slice(&(bundle.geometry.height as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.geometry.width as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for (idx, (_, events)) in bundle.partitions().iter().enumerate() {
        for event in *events {
            out.push(event.label.code());
            out.push(idx as u8);
            for &v in &event.grid {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_events(bundle: &DatasetBundle, path: &Path, binary: bool) -> Result<(), DataError> {
    let mut file = fs::File::create(path)?;
    if binary {
        file.write_all(&save_events_binary(bundle))?;
    } else {
        file.write_all(save_events_text(bundle).as_bytes())?;
    }
    Ok(())
}

fn geometry_from_meta(height: usize, width: usize, meta: &[String]) -> Geometry {
    let mut geom = Geometry {
        height,
        width,
        // full-scale cell size and radius unless the file says otherwise
        cell_h: 1.5,
        cell_w: 3.0,
        radius: 80.0,
    };
    for line in meta {
        if let Some(rest) = line.strip_prefix("# geometry ") {
            for kv in rest.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    if let Ok(x) = v.parse::<f64>() {
                        match k {
                            "cell_h" => geom.cell_h = x,
                            "cell_w" => geom.cell_w = x,
                            "radius" => geom.radius = x,
                            _ => {}
                        }
                    }
                }
            }
        }
    }
    geom
}

pub fn parse_events_text(text: &str) -> Result<DatasetBundle, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Truncated("empty file".into()))?;
    let mut head = header.split_whitespace();
    if head.next() != Some("EVT1") {
        return Err(DataError::BadMagic {
            path: "<text>".into(),
        });
    }
    let height: usize = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::Malformed {
            line: 1,
            reason: "bad height".into(),
        })?;
    let width: usize = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::Malformed {
            line: 1,
            reason: "bad width".into(),
        })?;
    let cells = height * width;

    let mut meta = Vec::new();
    let mut partitions: [Vec<EventMatrix>; 4] = [vec![], vec![], vec![], vec![]];
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            meta.push(line.to_string());
            continue;
        }
        let mut fields = line.split_whitespace();
        let partition: i64 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::Malformed {
                line: line_no,
                reason: "bad partition field".into(),
            })?;
        if !(0..=3).contains(&partition) {
            return Err(DataError::BadPartition {
                line: line_no,
                value: partition,
            });
        }
        let label_code: i64 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::Malformed {
                line: line_no,
                reason: "bad label field".into(),
            })?;
        let label = ClassLabel::from_code(label_code).ok_or(DataError::BadLabel {
            line: line_no,
            value: label_code,
        })?;
        let mut grid = Vec::with_capacity(cells);
        for field in fields {
            let v: f32 = field.parse().map_err(|_| DataError::Malformed {
                line: line_no,
                reason: format!("bad signal `{field}`"),
            })?;
            if v < 0.0 {
                return Err(DataError::NegativeSignal {
                    line: line_no,
                    value: v,
                });
            }
            grid.push(v);
        }
        if grid.len() != cells {
            return Err(DataError::Truncated(format!(
                "line {line_no}: {} signals, expected {cells}",
                grid.len()
            )));
        }
        partitions[partition as usize].push(EventMatrix { grid, label });
    }

    let geometry = geometry_from_meta(height, width, &meta);
    let [train, validation, test, generalisation] = partitions;
    let bundle = DatasetBundle {
        train,
        validation,
        test,
        generalisation,
        geometry,
        meta,
    };
    bundle.check()?;
    Ok(bundle)
}

pub fn parse_events_binary(bytes: &[u8]) -> Result<DatasetBundle, DataError> {
    if bytes.len() < 16 || &bytes[0..4] != b"EVTB" {
        return Err(DataError::BadMagic {
            path: "<binary>".into(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let height = u32_at(4);
    let width = u32_at(8);
    let n_events = u32_at(12);
    let cells = height * width;
    let record = 2 + cells * 4;
    if bytes.len() != 16 + n_events * record {
        return Err(DataError::Truncated(format!(
            "{} bytes, expected {}",
            bytes.len(),
            16 + n_events * record
        )));
    }
    let mut partitions: [Vec<EventMatrix>; 4] = [vec![], vec![], vec![], vec![]];
    for i in 0..n_events {
        let base = 16 + i * record;
        let label_code = bytes[base] as i64;
        let partition = bytes[base + 1] as i64;
        let label = ClassLabel::from_code(label_code).ok_or(DataError::BadLabel {
            line: i + 1,
            value: label_code,
        })?;
        if !(0..=3).contains(&partition) {
            return Err(DataError::BadPartition {
                line: i + 1,
                value: partition,
            });
        }
        let mut grid = Vec::with_capacity(cells);
        for c in 0..cells {
            let off = base + 2 + c * 4;
            grid.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        partitions[partition as usize].push(EventMatrix { grid, label });
    }
    let geometry = geometry_from_meta(height, width, &[]);
    let [train, validation, test, generalisation] = partitions;
    let bundle = DatasetBundle {
        train,
        validation,
        test,
        generalisation,
        geometry,
        meta: Vec::new(),
    };
    bundle.check()?;
    Ok(bundle)
}

pub fn load_events(path: &Path) -> Result<DatasetBundle, DataError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    let n = file.read(&mut magic)?;
    if n < 4 {
        return Err(DataError::Truncated("file shorter than magic".into()));
    }
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let mut bytes = magic.to_vec();
    bytes.extend_from_slice(&rest);
    match &magic {
        b"EVT1" => {
            let text = String::from_utf8(bytes).map_err(|e| DataError::Truncated(e.to_string()))?;
            parse_events_text(&text)
        }
        b"EVTB" => parse_events_binary(&bytes),
        _ => Err(DataError::BadMagic {
            path: path.display().to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Distribution parameters of the synthetic shower generator.
///
/// Gammas are a single smooth power-law deposit; protons share the base
/// profile but with a broader lateral scale, off-core satellite clusters,
/// and larger station-level fluctuations.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Shower cores fall uniformly within this fraction of the array radius.
    pub core_frac: f64,
    /// Lateral scale r0 (metres) of the gamma profile (1 + r/r0)^-beta.
    pub gamma_scale: f64,
    pub gamma_steepness: f64,
    /// Log-normal sigma of per-station multiplicative noise for gammas.
    pub gamma_noise: f64,
    pub proton_scale: f64,
    pub proton_steepness: f64,
    pub proton_noise: f64,
    /// Satellite cluster count range for protons (inclusive).
    pub clusters_min: usize,
    pub clusters_max: usize,
    /// Cluster centre distance from the core (metres).
    pub cluster_dist_min: f64,
    pub cluster_dist_max: f64,
    /// Gaussian width of a cluster (metres).
    pub cluster_sigma_min: f64,
    pub cluster_sigma_max: f64,
    /// Cluster amplitude as a fraction of the core amplitude.
    pub cluster_amp_min: f64,
    pub cluster_amp_max: f64,
    /// Log-normal sigma of the per-event energy scale.
    pub energy_spread: f64,
    /// train/validation/test/generalisation fractions per class.
    pub partition_fractions: [f64; 4],
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            core_frac: 0.6,
            gamma_scale: 9.0,
            gamma_steepness: 3.2,
            gamma_noise: 0.25,
            proton_scale: 14.0,
            proton_steepness: 2.7,
            proton_noise: 0.45,
            clusters_min: 2,
            clusters_max: 6,
            cluster_dist_min: 20.0,
            cluster_dist_max: 70.0,
            cluster_sigma_min: 4.0,
            cluster_sigma_max: 9.0,
            cluster_amp_min: 0.05,
            cluster_amp_max: 0.25,
            energy_spread: 0.3,
            partition_fractions: [0.70, 0.05, 0.10, 0.15],
        }
    }
}

impl SynthParams {
    pub fn meta_lines(&self, geometry: &Geometry, n_gamma: usize, n_proton: usize) -> Vec<String> {
        vec![
            format!(
                "# geometry cell_h={} cell_w={} radius={}",
                geometry.cell_h, geometry.cell_w, geometry.radius
            ),
            format!(
                "# synth n_gamma={n_gamma} n_proton={n_proton} core_frac={} \
                 gamma_scale={} gamma_steepness={} gamma_noise={} proton_scale={} \
                 proton_steepness={} proton_noise={} clusters={}..{} cluster_dist={}..{} \
                 cluster_sigma={}..{} cluster_amp={}..{} energy_spread={} fractions={:?}",
                self.core_frac,
                self.gamma_scale,
                self.gamma_steepness,
                self.gamma_noise,
                self.proton_scale,
                self.proton_steepness,
                self.proton_noise,
                self.clusters_min,
                self.clusters_max,
                self.cluster_dist_min,
                self.cluster_dist_max,
                self.cluster_sigma_min,
                self.cluster_sigma_max,
                self.cluster_amp_min,
                self.cluster_amp_max,
                self.energy_spread,
                self.partition_fractions,
            ),
        ]
    }
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generate one event and return it with the true core position.
pub fn synth_event(
    label: ClassLabel,
    geometry: &Geometry,
    params: &SynthParams,
    rng: &mut impl Rng,
) -> (EventMatrix, (f64, f64)) {
    // uniform core position within core_frac of the radius
    let max_r = params.core_frac * geometry.radius;
    let (core_x, core_y) = loop {
        let x = rng.random_range(-max_r..=max_r);
        let y = rng.random_range(-max_r..=max_r);
        if x * x + y * y <= max_r * max_r {
            break (x, y);
        }
    };

    let energy = (params.energy_spread * normal(rng)).exp() * 100.0;
    let (scale, steepness, noise) = match label {
        ClassLabel::Gamma => (params.gamma_scale, params.gamma_steepness, params.gamma_noise),
        ClassLabel::Proton => (
            params.proton_scale,
            params.proton_steepness,
            params.proton_noise,
        ),
    };

    // satellite clusters: proton-only transverse structure
    let mut clusters: Vec<(f64, f64, f64, f64)> = Vec::new();
    if label == ClassLabel::Proton {
        let count = rng.random_range(params.clusters_min..=params.clusters_max);
        for _ in 0..count {
            let dist = rng.random_range(params.cluster_dist_min..=params.cluster_dist_max);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let sigma = rng.random_range(params.cluster_sigma_min..=params.cluster_sigma_max);
            let amp =
                energy * rng.random_range(params.cluster_amp_min..=params.cluster_amp_max);
            clusters.push((
                core_x + dist * angle.cos(),
                core_y + dist * angle.sin(),
                sigma,
                amp,
            ));
        }
    }

    let mut grid = vec![0f32; geometry.cells()];
    for row in 0..geometry.height {
        for col in 0..geometry.width {
            if !geometry.in_array(row, col) {
                continue;
            }
            let (x, y) = geometry.cell_center(row, col);
            let r = ((x - core_x).powi(2) + (y - core_y).powi(2)).sqrt();
            let mut signal = energy * (1.0 + r / scale).powf(-steepness);
            for &(cx, cy, sigma, amp) in &clusters {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                signal += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            if noise > 0.0 {
                signal *= (noise * normal(rng)).exp();
            }
            grid[row * geometry.width + col] = signal as f32;
        }
    }
    (EventMatrix { grid, label }, (core_x, core_y))
}

fn partition_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for i in 1..4 {
        counts[i] = (n as f64 * fractions[i]).floor() as usize;
    }
    counts[0] = n - counts[1] - counts[2] - counts[3];
    counts
}

/// Generate a stratified synthetic bundle; the generator configuration is
/// embedded in the bundle's metadata so saved files are self-describing.
pub fn synth_generate(
    n_gamma: usize,
    n_proton: usize,
    geometry: &Geometry,
    params: &SynthParams,
    rng: &mut impl Rng,
) -> DatasetBundle {
    assert!(n_gamma >= 1 && n_proton >= 1, "need at least one event per class");
    let mut bundle = DatasetBundle {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        generalisation: Vec::new(),
        geometry: *geometry,
        meta: params.meta_lines(geometry, n_gamma, n_proton),
    };
    for (label, n) in [(ClassLabel::Gamma, n_gamma), (ClassLabel::Proton, n_proton)] {
        let counts = partition_counts(n, &params.partition_fractions);
        for (idx, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let (event, _) = synth_event(label, geometry, params, rng);
                match idx {
                    0 => bundle.train.push(event),
                    1 => bundle.validation.push(event),
                    2 => bundle.test.push(event),
                    _ => bundle.generalisation.push(event),
                }
            }
        }
    }
    bundle
}
