//! N-body dataset files: one JSON header line, then one JSON record per
//! trajectory, train records first, then validation, then test.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use geomformer_core::geometry::MolecularSystem;
use geomformer_core::linalg::Vec3;
use geomformer_core::nbody::{simulate_record, SimConfig, TrajectoryRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 3000,
            valid: 2000,
            test: 2000,
        }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train, valid, test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub n: usize,
    pub dt: f64,
    pub steps: usize,
    pub eps_soft: f64,
    pub counts: SplitCounts,
    pub base_seed: u64,
    pub velocity_scale: f64,
    pub blowup: f64,
    pub energy_tol: f64,
}

impl Header {
    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            particles: self.n,
            dt: self.dt,
            steps: self.steps,
            eps_soft: self.eps_soft,
            velocity_scale: self.velocity_scale,
            blowup: self.blowup,
            energy_tol: self.energy_tol,
            ..SimConfig::default()
        }
    }
}

/// On-disk record. Resample metadata is only written for substituted
/// trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RecordLine {
    seed: u64,
    charges: Vec<f64>,
    p0: Vec<Vec3>,
    v0: Vec<Vec3>,
    #[serde(rename = "pT")]
    p_t: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sample_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    resamples: u32,
}

fn is_zero(x: &u32) -> bool {
    *x == 0
}

impl From<&TrajectoryRecord> for RecordLine {
    fn from(r: &TrajectoryRecord) -> Self {
        RecordLine {
            seed: r.seed,
            charges: r.charges.clone(),
            p0: r.p0.clone(),
            v0: r.v0.clone(),
            p_t: r.p_t.clone(),
            sample_seed: (r.resamples > 0).then_some(r.sample_seed),
            resamples: r.resamples,
        }
    }
}

impl From<RecordLine> for TrajectoryRecord {
    fn from(r: RecordLine) -> Self {
        TrajectoryRecord {
            seed: r.seed,
            sample_seed: r.sample_seed.unwrap_or(r.seed),
            resamples: r.resamples,
            charges: r.charges,
            p0: r.p0,
            v0: r.v0,
            p_t: r.p_t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: Header,
    pub train: Vec<TrajectoryRecord>,
    pub valid: Vec<TrajectoryRecord>,
    pub test: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TrajectoryRecord] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Keeps the first `train`/`valid`/`test` records of each split.
    pub fn truncate(&mut self, train: Option<usize>, valid: Option<usize>, test: Option<usize>) {
        if let Some(k) = train {
            self.train.truncate(k);
        }
        if let Some(k) = valid {
            self.valid.truncate(k);
        }
        if let Some(k) = test {
            self.test.truncate(k);
        }
    }
}

/// Seeds of each split: consecutive, non-overlapping ranges starting at
/// `base_seed` (train, then valid, then test).
pub fn split_seeds(counts: &SplitCounts, base_seed: u64) -> Result<[Vec<u64>; 3]> {
    let total = counts.total() as u64;
    if base_seed.checked_add(total).is_none() {
        return Err(CliError::Config(format!("base seed {base_seed} + {total} records overflows u64")));
    }
    let range = |start: usize, len: usize| (0..len).map(|i| base_seed + (start + i) as u64).collect();
    Ok([
        range(0, counts.train),
        range(counts.train, counts.valid),
        range(counts.train + counts.valid, counts.test),
    ])
}

/// Simulates every split. Trajectories are generated in parallel on the
/// current rayon pool and assembled in seed order, so the result does not
/// depend on the thread count.
pub fn generate_dataset(counts: SplitCounts, base_seed: u64, sim: &SimConfig) -> Result<Dataset> {
    sim.validate()?;
    let [train, valid, test] = split_seeds(&counts, base_seed)?;
    let run = |seeds: Vec<u64>| -> Result<Vec<TrajectoryRecord>> {
        seeds
            .into_par_iter()
            .map(|s| simulate_record(s, sim).map_err(CliError::from))
            .collect()
    };
    Ok(Dataset {
        header: Header {
            version: FORMAT_VERSION,
            n: sim.particles,
            dt: sim.dt,
            steps: sim.steps,
            eps_soft: sim.eps_soft,
            counts,
            base_seed,
            velocity_scale: sim.velocity_scale,
            blowup: sim.blowup,
            energy_tol: sim.energy_tol,
        },
        train: run(train)?,
        valid: run(valid)?,
        test: run(test)?,
    })
}

pub fn write_dataset(dataset: &Dataset, out: impl Write) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer(&mut out, &dataset.header)?;
    out.write_all(b"\n")?;
    for r in dataset.train.iter().chain(&dataset.valid).chain(&dataset.test) {
        serde_json::to_writer(&mut out, &RecordLine::from(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_dataset(dataset, file).map_err(|e| CliError::io(path, e))
}

pub fn read_dataset(input: impl BufRead) -> Result<Dataset> {
    let mut lines = input.lines();
    let header_line = match lines.next() {
        Some(line) => line.map_err(|e| CliError::Format(format!("dataset header: {e}")))?,
        None => return Err(CliError::Format("dataset is empty".into())),
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| CliError::Format(format!("dataset header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(CliError::Format(format!(
            "dataset version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let mut records = Vec::with_capacity(header.counts.total());
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::Format(format!("dataset line {}: {e}", i + 2)))?;
        if line.is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| CliError::Format(format!("dataset line {}: {e}", i + 2)))?;
        let n = header.n;
        if rec.charges.len() != n || rec.p0.len() != n || rec.v0.len() != n || rec.p_t.len() != n {
            return Err(CliError::Format(format!(
                "dataset line {}: record does not have {n} particles",
                i + 2
            )));
        }
        records.push(TrajectoryRecord::from(rec));
    }
    if records.len() != header.counts.total() {
        return Err(CliError::Format(format!(
            "dataset has {} records, header declares {}",
            records.len(),
            header.counts.total()
        )));
    }
    let test = records.split_off(header.counts.train + header.counts.valid);
    let valid = records.split_off(header.counts.train);
    Ok(Dataset {
        header,
        train: records,
        valid,
        test,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    read_dataset(BufReader::new(file))
}

/// Regenerates one record from the header's integrator settings; used to
/// confirm a file's labels are reproducible.
pub fn resimulate(header: &Header, record: &TrajectoryRecord) -> Result<TrajectoryRecord> {
    Ok(simulate_record(record.seed, &header.sim_config())?)
}

/// Model input for a record: charges as types, `p0`, `v0`.
pub fn record_system(record: &TrajectoryRecord) -> Result<MolecularSystem> {
    Ok(MolecularSystem::new(record.type_ids(), record.p0.clone(), Some(record.v0.clone()))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let sim = SimConfig {
            steps: 50,
            ..SimConfig::default()
        };
        let counts = SplitCounts {
            train: 4,
            valid: 2,
            test: 3,
        };
        generate_dataset(counts, 11, &sim).unwrap()
    }

    #[test]
    fn split_seeds_are_disjoint_and_contiguous() {
        let [a, b, c] = split_seeds(&SplitCounts::default(), 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3000, 2000, 2000));
        let mut all: Vec<u64> = a.iter().chain(&b).chain(&c).copied().collect();
        all.dedup();
        assert_eq!(all.len(), 7000);
        assert_eq!(all, (7..7007).collect::<Vec<_>>());
        assert!(split_seeds(&SplitCounts::default(), u64::MAX - 10).is_err());
    }

    #[test]
    fn write_read_round_trip_is_exact() {
        let ds = small();
        let mut bytes = Vec::new();
        write_dataset(&ds, &mut bytes).unwrap();
        let back = read_dataset(bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write_dataset(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn header_line_has_documented_keys() {
        let mut bytes = Vec::new();
        write_dataset(&small(), &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        for key in ["version", "n", "dt", "steps", "eps_soft", "counts"] {
            assert!(header.get(key).is_some(), "{key}");
        }
        let rec: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        for key in ["seed", "charges", "p0", "v0", "pT"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn records_resimulate_bit_exactly() {
        let ds = small();
        for r in ds.train.iter().chain(&ds.test) {
            assert_eq!(&resimulate(&ds.header, r).unwrap(), r);
        }
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let mut bytes = Vec::new();
        write_dataset(&small(), &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_dataset(cut.as_bytes()), Err(CliError::Format(_))));
        assert!(matches!(read_dataset(&b""[..]), Err(CliError::Format(_))));
    }

    #[test]
    fn truncate_keeps_prefixes() {
        let mut ds = small();
        let first = ds.train[0].clone();
        ds.truncate(Some(1), None, Some(0));
        assert_eq!(ds.train, vec![first]);
        assert_eq!(ds.valid.len(), 2);
        assert!(ds.test.is_empty());
    }
}
