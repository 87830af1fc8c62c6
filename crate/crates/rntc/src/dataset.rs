//! Scenario synthesis, ground-truth labeling through the reachability
//! solver, and the on-disk dataset format.
//!
//! A training pair couples the two-channel SDF raster (current time and
//! `past_gap` seconds earlier) with the failure raster and the value grid at
//! the current time. Pairs whose reachability solve fails the convergence
//! certificate are dropped and replaced by later scenario ids, so a request
//! for N pairs always yields N pairs deterministically.

use crate::config::{Scale, WorldConfig};
use crate::geometry::{self, EnvironmentSnapshot, GridSpec, Obstacle, F_MAX};
use crate::hj::{solve_brt, HjParams, StateGrid};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RNTD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("pair {id} violates value <= failure; refusing to write a bad label")]
    Dominance { id: u64 },
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub scale: Scale,
    pub world: WorldConfig,
    pub hj: HjParams,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(scale: Scale, seed: u64) -> Self {
        Self { scale, world: WorldConfig::default(), hj: HjParams::default(), seed }
    }
}

/// Obstacle initial states for one training window, reproducible from the
/// dataset seed and the scenario id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub scenario_id: u64,
    pub obstacles: Vec<Obstacle>,
}

fn mix_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_scenario(cfg: &DatasetConfig, scenario_id: u64) -> TrajectorySample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, scenario_id));
    let n = rng.gen_range(0..=cfg.world.max_obstacles);
    let half = 0.5 * cfg.world.window_size;
    let obstacles = (0..n)
        .map(|_| {
            let cx = rng.gen_range(-half..half);
            let cy = rng.gen_range(-half..half);
            let speed = rng.gen_range(0.0..=cfg.world.max_speed);
            let heading = rng.gen_range(0.0..TAU);
            Obstacle::new(
                [cx, cy],
                cfg.world.obstacle_radius,
                [speed * heading.cos(), speed * heading.sin()],
            )
        })
        .collect();
    TrajectorySample { scenario_id, obstacles }
}

pub fn generate_scenarios(cfg: &DatasetConfig, count: usize) -> Vec<TrajectorySample> {
    (0..count as u64).map(|id| sample_scenario(cfg, id)).collect()
}

/// One labeled training pair. Channel 0 of `sdf_pair` is the current time,
/// channel 1 is `past_gap` seconds into the past.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub scenario_id: u64,
    pub obstacles: Vec<Obstacle>,
    pub sdf_pair: Vec<f32>,
    pub failure: Vec<f32>,
    pub value: Vec<f32>,
    pub converged: bool,
}

/// Grid geometry shared by every pair of a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetHeader {
    pub scale: Scale,
    pub nx: usize,
    pub ny: usize,
    pub ntheta: usize,
    pub sdf_n: usize,
    pub k_past: usize,
    pub max_obstacles: usize,
    pub dt: f32,
    pub past_gap: f32,
    pub window_size: f32,
    pub f_max: f32,
    pub horizon: f32,
    pub obstacle_radius: f32,
    pub inflation: f32,
    pub count: u64,
    pub config_hash: u64,
}

impl DatasetHeader {
    pub fn for_config(cfg: &DatasetConfig, count: u64, config_hash: u64) -> Self {
        Self {
            scale: cfg.scale,
            nx: cfg.scale.grid_n(),
            ny: cfg.scale.grid_n(),
            ntheta: cfg.scale.ntheta(),
            sdf_n: cfg.scale.sdf_n(),
            k_past: 2,
            max_obstacles: cfg.world.max_obstacles,
            dt: cfg.world.dt as f32,
            past_gap: cfg.world.past_gap as f32,
            window_size: cfg.world.window_size as f32,
            f_max: F_MAX as f32,
            horizon: cfg.hj.horizon as f32,
            obstacle_radius: cfg.world.obstacle_radius as f32,
            inflation: cfg.world.inflation as f32,
            count,
            config_hash,
        }
    }

    fn pair_payload(&self) -> usize {
        self.k_past * self.sdf_n * self.sdf_n + self.nx * self.ny * self.ntheta
            + self.nx * self.ny
    }

    /// Serialized size of one pair record in bytes.
    fn pair_size(&self) -> usize {
        8 + 4 + 4 + self.max_obstacles * 5 * 4 + self.pair_payload() * 4
    }
}

/// Label one scenario: rasterize the SDF channels, evaluate the failure
/// raster, and solve the HJB-VI over the future horizon under
/// constant-velocity extrapolation.
pub fn label(cfg: &DatasetConfig, sample: &TrajectorySample) -> TrainingPair {
    let snapshot = EnvironmentSnapshot::new(sample.obstacles.clone(), [0.0, 0.0], cfg.world.window_size);
    let sdf_spec = GridSpec::square(cfg.scale.sdf_n()).expect("nonzero sdf raster");
    let now = geometry::rasterize(&snapshot, sdf_spec, cfg.world.inflation);
    let past = geometry::rasterize(
        &geometry::shift(&snapshot, -cfg.world.past_gap),
        sdf_spec,
        cfg.world.inflation,
    );
    let mut sdf_pair: Vec<f32> = Vec::with_capacity(2 * now.values.len());
    sdf_pair.extend(now.values.iter().map(|&v| v as f32));
    sdf_pair.extend(past.values.iter().map(|&v| v as f32));

    let grid = cfg.scale.state_grid([0.0, 0.0], cfg.world.window_size);
    let grid_spec = GridSpec::square(cfg.scale.grid_n()).expect("nonzero state grid");
    let inflation = cfg.world.inflation;
    let fail_at = |t: f64| geometry::rasterize(&geometry::predict(&snapshot, t), grid_spec, inflation).values;
    let failure: Vec<f32> = fail_at(0.0).iter().map(|&v| v as f32).collect();
    let sol = solve_brt(fail_at, grid, &cfg.hj);
    TrainingPair {
        scenario_id: sample.scenario_id,
        obstacles: sample.obstacles.clone(),
        sdf_pair,
        failure,
        value: sol.value.values.iter().map(|&v| v as f32).collect(),
        converged: sol.converged,
    }
}

/// Generate exactly `count` converged pairs, in scenario-id order. Dropped
/// (non-converged) scenarios are replaced by later ids; the result does not
/// depend on the worker count.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    count: usize,
    workers: usize,
) -> (Vec<TrainingPair>, usize) {
    let pool = crate::worker_pool(workers);
    let mut kept: Vec<TrainingPair> = Vec::with_capacity(count);
    let mut dropped = 0usize;
    let mut next_id = 0u64;
    let block = 64.max(count / 8);
    while kept.len() < count {
        let ids: Vec<u64> = (next_id..next_id + block as u64).collect();
        next_id += block as u64;
        let mut labeled: Vec<TrainingPair> = pool.install(|| {
            ids.par_iter().map(|&id| label(cfg, &sample_scenario(cfg, id))).collect()
        });
        for pair in labeled.drain(..) {
            if kept.len() == count {
                break;
            }
            if pair.converged {
                kept.push(pair);
            } else {
                dropped += 1;
            }
        }
    }
    (kept, dropped)
}

pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    pairs: &[TrainingPair],
) -> Result<(), DatasetError> {
    assert_eq!(header.count as usize, pairs.len());
    // Reject labels that violate the dominance invariant: they indicate a
    // solver bug, not a property of the data.
    for p in pairs {
        let per_cell = header.ntheta;
        for (cell, &f) in p.failure.iter().enumerate() {
            for k in 0..per_cell {
                if p.value[cell * per_cell + k] > f {
                    return Err(DatasetError::Dominance { id: p.scenario_id });
                }
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(match header.scale {
        Scale::Desk => 0,
        Scale::Paper => 1,
    })?;
    w.write_u8(0)?;
    w.write_u16::<LittleEndian>(0)?;
    for v in [
        header.nx,
        header.ny,
        header.ntheta,
        header.sdf_n,
        header.k_past,
        header.max_obstacles,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for v in [
        header.dt,
        header.past_gap,
        header.window_size,
        header.f_max,
        header.horizon,
        header.obstacle_radius,
        header.inflation,
    ] {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(header.count)?;
    w.write_u64::<LittleEndian>(header.config_hash)?;
    for p in pairs {
        debug_assert!(p.obstacles.len() <= header.max_obstacles);
        w.write_u64::<LittleEndian>(p.scenario_id)?;
        w.write_u32::<LittleEndian>(p.obstacles.len() as u32)?;
        w.write_u8(p.converged as u8)?;
        w.write_all(&[0u8; 3])?;
        for i in 0..header.max_obstacles {
            let (c, r, v) = match p.obstacles.get(i) {
                Some(o) => (o.center, o.radius, o.velocity),
                None => ([0.0, 0.0], 0.0, [0.0, 0.0]),
            };
            for val in [c[0], c[1], r, v[0], v[1]] {
                w.write_f32::<LittleEndian>(val as f32)?;
            }
        }
        for &v in p.sdf_pair.iter().chain(&p.failure).chain(&p.value) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Random-access reader over a dataset file. Records have a fixed size, so
/// pairs are read on demand without loading the whole file.
#[derive(Debug, Clone)]
pub struct FileDataset {
    path: PathBuf,
    pub header: DatasetHeader,
    data_offset: u64,
}

const HEADER_SIZE: u64 = 4 + 4 + 4 + 6 * 4 + 7 * 4 + 8 + 8;

impl FileDataset {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(DatasetError::Version(version));
        }
        let scale = match r.read_u8()? {
            0 => Scale::Desk,
            1 => Scale::Paper,
            b => return Err(DatasetError::Corrupt(format!("unknown scale byte {b}"))),
        };
        let mut skip = [0u8; 3];
        r.read_exact(&mut skip)?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let mut floats = [0f32; 7];
        for f in floats.iter_mut() {
            *f = r.read_f32::<LittleEndian>()?;
        }
        let count = r.read_u64::<LittleEndian>()?;
        let config_hash = r.read_u64::<LittleEndian>()?;
        let header = DatasetHeader {
            scale,
            nx: dims[0],
            ny: dims[1],
            ntheta: dims[2],
            sdf_n: dims[3],
            k_past: dims[4],
            max_obstacles: dims[5],
            dt: floats[0],
            past_gap: floats[1],
            window_size: floats[2],
            f_max: floats[3],
            horizon: floats[4],
            obstacle_radius: floats[5],
            inflation: floats[6],
            count,
            config_hash,
        };
        let expected = HEADER_SIZE + count * header.pair_size() as u64;
        let actual = std::fs::metadata(path)?.len();
        if actual != expected {
            return Err(DatasetError::Corrupt(format!(
                "file is {actual} bytes, header implies {expected}"
            )));
        }
        Ok(Self { path: path.to_path_buf(), header, data_offset: HEADER_SIZE })
    }

    /// Fail unless the file was produced at the given scale.
    pub fn require_scale(&self, scale: Scale) -> Result<(), DatasetError> {
        if self.header.scale != scale {
            return Err(DatasetError::Geometry(format!(
                "dataset is {} scale, requested {}",
                self.header.scale.as_str(),
                scale.as_str()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn read_pair(&self, idx: usize) -> Result<TrainingPair, DatasetError> {
        assert!(idx < self.len());
        let h = &self.header;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.data_offset + (idx * h.pair_size()) as u64))?;
        let mut r = BufReader::new(f);
        let scenario_id = r.read_u64::<LittleEndian>()?;
        let n_obs = r.read_u32::<LittleEndian>()? as usize;
        if n_obs > h.max_obstacles {
            return Err(DatasetError::Corrupt(format!("pair {idx} claims {n_obs} obstacles")));
        }
        let converged = r.read_u8()? != 0;
        let mut pad = [0u8; 3];
        r.read_exact(&mut pad)?;
        let mut obstacles = Vec::with_capacity(n_obs);
        for i in 0..h.max_obstacles {
            let mut rec = [0f32; 5];
            for v in rec.iter_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
            if i < n_obs {
                obstacles.push(Obstacle::new(
                    [rec[0] as f64, rec[1] as f64],
                    rec[2] as f64,
                    [rec[3] as f64, rec[4] as f64],
                ));
            }
        }
        let read_block = |r: &mut BufReader<File>, n: usize| -> Result<Vec<f32>, DatasetError> {
            let mut out = vec![0f32; n];
            for v in out.iter_mut() {
                *v = r
                    .read_f32::<LittleEndian>()
                    .map_err(|_| DatasetError::Corrupt("truncated payload".into()))?;
            }
            Ok(out)
        };
        let sdf_pair = read_block(&mut r, h.k_past * h.sdf_n * h.sdf_n)?;
        let failure = read_block(&mut r, h.nx * h.ny)?;
        let value = read_block(&mut r, h.nx * h.ny * h.ntheta)?;
        Ok(TrainingPair { scenario_id, obstacles, sdf_pair, failure, value, converged })
    }

    pub fn read_all(&self) -> Result<Vec<TrainingPair>, DatasetError> {
        (0..self.len()).map(|i| self.read_pair(i)).collect()
    }

    /// The state grid the stored value functions live on.
    pub fn state_grid(&self) -> StateGrid {
        let h = &self.header;
        let w = h.window_size as f64;
        StateGrid::new(h.nx, h.ny, h.ntheta, [-0.5 * w, -0.5 * w], w)
    }
}
