//! Versioned binary container for trained hypernetwork weights.
//!
//! Layout: magic `RNTC`, version, scale and mode bytes, config hash, weight
//! count, a UTF-8 echo of the training configuration, then the flat
//! parameter payload as little-endian f32.

use super::hypernet::{HyperNet, HyperNetSpec};
use super::TrainMode;
use crate::config::Scale;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RNTC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("weight count {got} does not match the {scale} architecture ({want})")]
    Mismatch { got: usize, want: usize, scale: &'static str },
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub scale: Scale,
    pub mode: TrainMode,
    pub config_hash: u64,
    pub config_echo: String,
    pub weights: Vec<f32>,
}

impl Checkpoint {
    pub fn from_net(
        net: &HyperNet,
        scale: Scale,
        mode: TrainMode,
        config_echo: String,
    ) -> Self {
        Self {
            scale,
            mode,
            config_hash: crate::config::config_hash(&config_echo),
            config_echo,
            weights: net.weights.iter().map(|&w| w as f32).collect(),
        }
    }

    /// Reconstruct the hypernetwork (f32 payload widened to f64).
    pub fn to_net(&self) -> Result<HyperNet, CheckpointError> {
        let spec = HyperNetSpec::for_scale(self.scale);
        if self.weights.len() != spec.param_count() {
            return Err(CheckpointError::Mismatch {
                got: self.weights.len(),
                want: spec.param_count(),
                scale: self.scale.as_str(),
            });
        }
        Ok(HyperNet { spec, weights: self.weights.iter().map(|&w| w as f64).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u8(match self.scale {
            Scale::Desk => 0,
            Scale::Paper => 1,
        })?;
        w.write_u8(match self.mode {
            TrainMode::Rntc => 0,
            TrainMode::Ntc => 1,
        })?;
        w.write_u16::<LittleEndian>(0)?;
        w.write_u64::<LittleEndian>(self.config_hash)?;
        w.write_u64::<LittleEndian>(self.weights.len() as u64)?;
        let echo = self.config_echo.as_bytes();
        w.write_u32::<LittleEndian>(echo.len() as u32)?;
        w.write_all(echo)?;
        for &v in &self.weights {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let scale = match r.read_u8()? {
            0 => Scale::Desk,
            1 => Scale::Paper,
            b => return Err(CheckpointError::Corrupt(format!("unknown scale byte {b}"))),
        };
        let mode = match r.read_u8()? {
            0 => TrainMode::Rntc,
            1 => TrainMode::Ntc,
            b => return Err(CheckpointError::Corrupt(format!("unknown mode byte {b}"))),
        };
        r.read_u16::<LittleEndian>()?;
        let config_hash = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let want = HyperNetSpec::for_scale(scale).param_count();
        if n != want {
            return Err(CheckpointError::Mismatch { got: n, want, scale: scale.as_str() });
        }
        let echo_len = r.read_u32::<LittleEndian>()? as usize;
        let mut echo = vec![0u8; echo_len];
        r.read_exact(&mut echo)
            .map_err(|_| CheckpointError::Corrupt("truncated config echo".into()))?;
        let config_echo = String::from_utf8(echo)
            .map_err(|_| CheckpointError::Corrupt("config echo is not UTF-8".into()))?;
        let mut weights = vec![0.0f32; n];
        for v in weights.iter_mut() {
            *v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| CheckpointError::Corrupt("truncated weight payload".into()))?;
        }
        Ok(Self { scale, mode, config_hash, config_echo, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let net = HyperNet::init(HyperNetSpec::for_scale(Scale::Desk), 5);
        let ck = Checkpoint::from_net(&net, Scale::Desk, TrainMode::Rntc, "seed = 5".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rntc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.weights, ck.weights);
        assert_eq!(back.mode, TrainMode::Rntc);
        assert_eq!(back.scale, Scale::Desk);
        assert_eq!(back.config_echo, "seed = 5");
        assert_eq!(back.config_hash, ck.config_hash);
        let net2 = back.to_net().unwrap();
        assert_eq!(net2.weights.len(), net.weights.len());
    }

    #[test]
    fn truncated_file_is_a_corruption_error() {
        let net = HyperNet::init(HyperNetSpec::for_scale(Scale::Desk), 5);
        let ck = Checkpoint::from_net(&net, Scale::Desk, TrainMode::Ntc, String::new());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rntc");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match Checkpoint::load(&path) {
            Err(CheckpointError::Corrupt(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::BadMagic)));
    }
}
