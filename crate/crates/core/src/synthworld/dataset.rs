use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_standard_normal, World};
use crate::energymodel::ConceptAssignment;
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.csv";
pub const WORLD_FILE: &str = "world.json";

/// A prior latent with its oracle labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub latent: Vec<f64>,
    pub labels: ConceptAssignment,
}

/// `n` i.i.d. prior draws with oracle labels, all drawn from one stream
/// seeded by `seed`.
pub fn make_dataset(world: &World, n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("a dataset needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let latent = sample_standard_normal(&mut rng, world.latent_dim());
            let labels = world.oracle_label(&latent);
            Sample { latent, labels }
        })
        .collect())
}

/// Writes `dataset.csv` and `world.json` into `dir`.
///
/// The CSV header is `v0,…,v{d−1}` followed by the concept names; each row
/// holds the latent in shortest round-trip decimal form and the 0/1 labels.
pub fn save_dataset(dir: &Path, world: &World, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = world.latent_dim();
    let path = dir.join(DATASET_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let header: Vec<String> = (0..d).map(|i| format!("v{i}")).chain(world.concepts().names()).collect();
    w.write_record(&header)?;
    for s in samples {
        if s.latent.len() != d || s.labels.len() != world.concepts().len() {
            return Err(Error::invalid("sample does not match the world's dimensions"));
        }
        let row: Vec<String> =
            s.latent.iter().map(|x| x.to_string()).chain(s.labels.values().iter().map(|c| c.to_string())).collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let json = serde_json::to_string_pretty(world)?;
    let wpath = dir.join(WORLD_FILE);
    fs::write(&wpath, json + "\n").map_err(|e| Error::io(&wpath, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(World, Vec<Sample>)> {
    let wpath = dir.join(WORLD_FILE);
    let world: World = serde_json::from_str(&fs::read_to_string(&wpath).map_err(|e| Error::io(&wpath, e))?)?;
    let d = world.latent_dim();
    let k = world.concepts().len();
    let mut r = csv::Reader::from_path(dir.join(DATASET_FILE))?;
    let expected: Vec<String> = (0..d).map(|i| format!("v{i}")).chain(world.concepts().names()).collect();
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != expected {
        return Err(Error::invalid(format!("dataset header {header:?} does not match {expected:?}")));
    }
    let mut samples = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid(format!("{}: row {}: {what}", DATASET_FILE, line + 2));
        let latent = rec.iter().take(d).map(|f| f.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad latent value"))?;
        let labels = rec.iter().skip(d).map(|f| f.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad label"))?;
        if labels.len() != k {
            return Err(bad("wrong number of labels"));
        }
        samples.push(Sample { latent, labels: ConceptAssignment::new(labels) });
    }
    Ok((world, samples))
}
