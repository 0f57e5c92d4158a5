use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MetricRecord, TrainConfig};
use crate::diffengine::{Array, ParameterSet};
use crate::diffusion::ScheduleConfig;
use crate::energymodel::{Architecture, ConceptSpec, EnergyNetwork};
use crate::error::{Error, Result};
use crate::synthworld::{World, WorldConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_DIR: &str = "params";
const FORMAT: &str = "cocobot-checkpoint";
const VERSION: u32 = 1;

/// Trained (or freshly initialized) model with everything needed to
/// sample from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: EnergyNetwork,
    pub schedule: ScheduleConfig,
    pub world: WorldConfig,
    /// Completed optimizer updates.
    pub step: u64,
    pub history: Vec<MetricRecord>,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    concepts: ConceptSpec,
    architecture: Architecture,
    schedule: ScheduleConfig,
    world: WorldConfig,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    history: Vec<MetricRecord>,
    parameters: Vec<ParamEntry>,
}

/// One parameter array stored as raw little-endian `f64` values in
/// `params/<name>.f64`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn blob(a: &Array) -> Vec<u8> {
    a.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn new(network: EnergyNetwork, schedule: ScheduleConfig, world: WorldConfig) -> Result<Self> {
        let ck = Self { network, schedule, world, step: 0, history: Vec::new(), train: None };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let arch = self.network.arch();
        if self.world.concepts != *self.network.concepts() {
            return Err(Error::Checkpoint("world and network concept sets differ".into()));
        }
        if arch.latent_dim != self.world.latent_dim {
            return Err(Error::Checkpoint("world and network latent dimensions differ".into()));
        }
        if arch.timesteps != self.schedule.timesteps {
            return Err(Error::Checkpoint("schedule and network timestep counts differ".into()));
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<World> {
        World::new(self.world.clone())
    }

    pub fn is_untrained(&self) -> bool {
        self.step == 0
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            concepts: self.network.concepts().clone(),
            architecture: self.network.arch().clone(),
            schedule: self.schedule,
            world: self.world.clone(),
            step: self.step,
            train: self.train.clone(),
            history: self.history.clone(),
            parameters: self
                .network
                .params()
                .iter()
                .map(|(name, a)| ParamEntry { name: name.into(), shape: a.shape().to_vec(), file: format!("{PARAMS_DIR}/{name}.f64") })
                .collect(),
        }
    }

    fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest())?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// SHA-256 over the manifest bytes followed by every parameter blob in
    /// manifest order, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest_bytes()?);
        for a in self.network.params().arrays() {
            h.update(blob(a));
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let pdir = dir.join(PARAMS_DIR);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        for (name, a) in self.network.params().iter() {
            let path = pdir.join(format!("{name}.f64"));
            fs::write(&path, blob(a)).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest_bytes()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", m.format, m.version)));
        }
        let mut params = ParameterSet::new();
        for p in &m.parameters {
            if p.file != format!("{PARAMS_DIR}/{}.f64", p.name) {
                return Err(Error::Checkpoint(format!("unexpected blob path `{}`", p.file)));
            }
            let bpath = dir.join(&p.file);
            let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
            let n: usize = p.shape.iter().product();
            if bytes.len() != 8 * n {
                return Err(Error::Checkpoint(format!("`{}` holds {} bytes, expected {}", p.file, bytes.len(), 8 * n)));
            }
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
            let a = Array::new(p.shape.clone(), data).map_err(|e| Error::Checkpoint(format!("`{}`: {e}", p.name)))?;
            params.insert(p.name.clone(), a).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let network = EnergyNetwork::from_params(m.concepts, m.architecture, params)?;
        let ck = Self { network, schedule: m.schedule, world: m.world, step: m.step, history: m.history, train: m.train };
        ck.validate()?;
        Ok(ck)
    }
}
