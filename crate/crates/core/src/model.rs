//! The encoder and the proposal net over one parameter store, sharing the
//! token embedding table.

use rand::Rng;

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::mask_proposal::{MapNetConfig, MapNetParams};
use crate::params::{normal_tensor, ParamStore};
use crate::transformer::INIT_STD;

pub const SHARED_EMBEDDING: &str = "shared.tok_emb";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub mapnet: MapNetParams,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let tok_emb = store.add(
            SHARED_EMBEDDING,
            normal_tensor(&[config.vocab_size, config.hidden_size], INIT_STD, rng),
        );
        let map_config = MapNetConfig::half_of(&config);
        let encoder = EncoderParams::init(&mut store, config, tok_emb, rng);
        let mapnet = MapNetParams::init(&mut store, map_config, tok_emb, rng);
        Ok(Self {
            store,
            encoder,
            mapnet,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }
}
