//! The two trainable networks behind one enum, built from a config and seed.

use cospa_core::cospa::{Cospa, CospaConfig, CrunetModel, Example, Model};
use cospa_core::ctensor::{ParamStore, Tape, Var};
use cospa_core::scene::RenderedScene;
use cospa_core::stft::Stft;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Multichannel spatial autoencoder.
    Cospa,
    /// Single-channel mask network (baseline and DNN-MVDR noise estimator).
    Crunet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cospa => "cospa",
            ModelKind::Crunet => "crunet",
        }
    }
}

/// Layer sizes by name: the full-size network, a small one that trains on
/// a laptop in minutes, and a toy one for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
    Tiny,
}

impl Preset {
    pub fn config(self) -> CospaConfig {
        match self {
            Preset::Full => CospaConfig::default(),
            Preset::Desk => CospaConfig::desk(),
            Preset::Tiny => CospaConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Cospa(Cospa),
    Crunet(CrunetModel),
}

impl Network {
    /// Fresh network; initial weights depend only on `(kind, config, seed)`.
    pub fn build(kind: ModelKind, config: CospaConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match kind {
            ModelKind::Cospa => Network::Cospa(Cospa::new(&mut store, &mut rng, config)?),
            ModelKind::Crunet => Network::Crunet(CrunetModel::new(&mut store, &mut rng, config)?),
        };
        Ok((net, store))
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Cospa(_) => ModelKind::Cospa,
            Network::Crunet(_) => ModelKind::Crunet,
        }
    }

    pub fn config(&self) -> &CospaConfig {
        match self {
            Network::Cospa(m) => &m.config,
            Network::Crunet(m) => &m.config,
        }
    }

    pub fn example(&self, stft: &Stft, scene: &RenderedScene) -> Result<Example> {
        Ok(match self {
            Network::Cospa(_) => Example::for_cospa(stft, scene)?,
            Network::Crunet(_) => Example::for_crunet(stft, scene)?,
        })
    }
}

impl Model for Network {
    fn loss(&self, tape: &mut Tape<'_>, example: &Example) -> cospa_core::Result<Var> {
        match self {
            Network::Cospa(m) => Model::loss(m, tape, example),
            Network::Crunet(m) => Model::loss(m, tape, example),
        }
    }
}
