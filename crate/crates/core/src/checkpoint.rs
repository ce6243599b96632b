//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HINR" | version: u32 | config_len: u64 | config: UTF-8 JSON
//! blob_count: u32 | per blob: name_len: u32, name, count: u64, count × f32
//! ```
//!
//! Encoder tables are stored level-major, entry-major, feature-minor. MLP and
//! CoordNet buffers are stored layer by layer, each weight matrix row-major
//! (`out × in`) followed by its bias.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::hash_encoding::{HashEncoder, HashEncoderConfig};
use crate::hypernet::{EncoderAtlas, HyperInrModel, ParamSpace};
use crate::networks::{CoordNet, CoordNetConfig, MlpConfig, SynthesisMlp};

pub const MAGIC: &[u8; 4] = b"HINR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub blobs: Vec<(String, Vec<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, n: u64) -> Result<usize> {
        usize::try_from(n).map_err(|_| Error::format(self.path, "length overflows usize"))
    }
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            version: VERSION,
            config,
            blobs: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f32>) {
        self.blobs.push((name.into(), values));
    }

    pub fn blob(&self, name: &str) -> Option<&[f32]> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("JSON values always serialize");
        let payload: usize = self.blobs.iter().map(|(n, v)| 12 + n.len() + 4 * v.len()).sum();
        let mut out = Vec::with_capacity(20 + config.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, values) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing HINR magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = r.u64()?;
        let n = r.len(n)?;
        let config = serde_json::from_slice(r.take(n)?).map_err(|e| Error::format(path, e))?;
        let count = r.u32()?;
        let mut blobs = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::format(path, e))?;
            let len = r.u64()?;
            let len = r.len(len)?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "blob too large"))?)?;
            blobs.push((name, crate::fields::io::le_bytes_to_f32s(raw)));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { version, config, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Structured header stored in the config block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHeader {
    Hyperinr {
        space: ParamSpace,
        /// Normalized atlas positions.
        positions: Vec<Vec<f64>>,
        encoder: HashEncoderConfig,
        mlp: MlpConfig,
        k: usize,
        power: f64,
    },
    Coordnet {
        space: ParamSpace,
        config: CoordNetConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelHeader,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
}

fn header(ckpt: &Checkpoint, path: &Path) -> Result<CheckpointConfig> {
    serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::format(path, e))
}

fn blob(ckpt: &Checkpoint, name: &str, path: &Path) -> Result<Vec<f32>> {
    ckpt.blob(name)
        .map(<[f32]>::to_vec)
        .ok_or_else(|| Error::format(path, format!("missing blob {name:?}")))
}

pub fn hyperinr_checkpoint(model: &HyperInrModel, experiment: Option<&ExperimentConfig>) -> Checkpoint {
    let cfg = CheckpointConfig {
        model: ModelHeader::Hyperinr {
            space: model.atlas.space().clone(),
            positions: model.atlas.positions().to_vec(),
            encoder: *model.atlas.encoder_config(),
            mlp: model.mlp.config,
            k: model.k,
            power: model.power,
        },
        experiment: experiment.cloned(),
    };
    let mut ckpt = Checkpoint::new(serde_json::to_value(cfg).expect("config serializes"));
    ckpt.push("mlp", model.mlp.params.as_slice().to_vec());
    for (j, enc) in model.atlas.encoders().iter().enumerate() {
        ckpt.push(format!("encoder.{j}"), enc.params().to_vec());
    }
    ckpt
}

pub fn save_hyperinr(path: &Path, model: &HyperInrModel, experiment: Option<&ExperimentConfig>) -> Result<()> {
    hyperinr_checkpoint(model, experiment).save(path)
}

pub fn hyperinr_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(HyperInrModel, Option<ExperimentConfig>)> {
    let cfg = header(ckpt, path)?;
    let ModelHeader::Hyperinr {
        space,
        positions,
        encoder,
        mlp,
        k,
        power,
    } = cfg.model
    else {
        return Err(Error::format(path, "not a HyperINR checkpoint"));
    };
    let encoders = (0..positions.len())
        .map(|j| HashEncoder::from_params(encoder, blob(ckpt, &format!("encoder.{j}"), path)?))
        .collect::<Result<Vec<_>>>()?;
    let atlas = EncoderAtlas::new(space, positions, encoders)?;
    let mlp = SynthesisMlp::from_params(mlp, blob(ckpt, "mlp", path)?)?;
    let mut model = HyperInrModel::new(atlas, mlp, Some(k))?;
    model.power = power;
    Ok((model, cfg.experiment))
}

pub fn load_hyperinr(path: &Path) -> Result<(HyperInrModel, Option<ExperimentConfig>)> {
    hyperinr_from_checkpoint(&Checkpoint::load(path)?, path)
}

pub fn save_coordnet(path: &Path, net: &CoordNet, space: &ParamSpace, experiment: Option<&ExperimentConfig>) -> Result<()> {
    let cfg = CheckpointConfig {
        model: ModelHeader::Coordnet {
            space: space.clone(),
            config: net.config,
        },
        experiment: experiment.cloned(),
    };
    let mut ckpt = Checkpoint::new(serde_json::to_value(cfg).expect("config serializes"));
    ckpt.push("weights", net.params.as_slice().to_vec());
    ckpt.save(path)
}

pub fn load_coordnet(path: &Path) -> Result<(CoordNet, ParamSpace, Option<ExperimentConfig>)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = header(&ckpt, path)?;
    let ModelHeader::Coordnet { space, config } = cfg.model else {
        return Err(Error::format(path, "not a CoordNet checkpoint"));
    };
    let net = CoordNet::from_params(config, blob(&ckpt, "weights", path)?)?;
    Ok((net, space, cfg.experiment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{init_hash_encoder, init_siren};
    use crate::numerics::Rng;

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn container_round_trip_and_errors() {
        let mut c = Checkpoint::new(serde_json::json!({"a": 1, "pi": 3.141592653589793}));
        c.push("x", vec![1.5, -0.0, f32::MIN_POSITIVE, 1e-40]);
        c.push("empty", vec![]);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"HINR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(bits(back.blob("x").unwrap()), bits(c.blob("x").unwrap()));
        assert_eq!(back.config, c.config);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, Path::new("mem")).is_err());
    }

    #[test]
    fn hyperinr_round_trip_is_bit_exact() {
        let enc = HashEncoderConfig {
            dim: 2,
            levels: 3,
            table_size: 1 << 6,
            features: 2,
            base_resolution: 2,
        };
        let mut rng = Rng::new(12);
        let positions = vec![vec![0.1, 0.2], vec![0.7, 0.3], vec![0.4, 0.9], vec![1.0 / 3.0, 0.0]];
        let encoders = positions
            .iter()
            .map(|_| {
                let mut e = HashEncoder::zeros(enc).unwrap();
                init_hash_encoder(&mut e, &mut rng);
                e
            })
            .collect();
        let space = ParamSpace::new(vec![
            crate::hypernet::ParamDim {
                name: "polar".into(),
                lower: 20.0,
                upper: 80.0,
            },
            crate::hypernet::ParamDim {
                name: "azimuth".into(),
                lower: 0.0,
                upper: 360.0,
            },
        ])
        .unwrap();
        let atlas = EncoderAtlas::new(space, positions, encoders).unwrap();
        let mut mlp = SynthesisMlp::zeros(MlpConfig::synthesis(enc.output_dim(), 3)).unwrap();
        mlp.init_he(&mut rng);
        let model = HyperInrModel::new(atlas, mlp, Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hinr");
        save_hyperinr(&path, &model, None).unwrap();
        let (back, exp) = load_hyperinr(&path).unwrap();
        assert!(exp.is_none());
        assert_eq!(back.atlas.positions(), model.atlas.positions());
        assert_eq!(bits(back.mlp.params.as_slice()), bits(model.mlp.params.as_slice()));
        for (a, b) in back.atlas.encoders().iter().zip(model.atlas.encoders()) {
            assert_eq!(bits(a.params()), bits(b.params()));
        }
        assert_eq!(back.k, 3);
        // saving the loaded model reproduces the file byte for byte
        let again = dir.path().join("again.hinr");
        save_hyperinr(&again, &back, None).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert!(load_coordnet(&path).is_err());
    }

    #[test]
    fn coordnet_round_trip() {
        let cfg = CoordNetConfig {
            width: 8,
            encoder_blocks: 1,
            trunk_blocks: 1,
            decoder_blocks: 1,
            ..CoordNetConfig::full(4, 1)
        };
        let mut net = CoordNet::zeros(cfg).unwrap();
        init_siren(&mut net, &mut Rng::new(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hinr");
        let space = ParamSpace::unit(&["t"]);
        save_coordnet(&path, &net, &space, None).unwrap();
        let (back, s, _) = load_coordnet(&path).unwrap();
        assert_eq!(s, space);
        assert_eq!(bits(back.params.as_slice()), bits(net.params.as_slice()));
    }
}
