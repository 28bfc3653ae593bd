use serde::{Deserialize, Serialize};

use super::block::{BlockDims, TrajMambaBlock};
use super::scan::ScanMode;
use crate::error::{Error, Result};
use crate::features::{PackedBatch, PointEmbedder, PreparedTrajectory};
use crate::par;
use crate::tensor::rng::Rng;
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajMambaConfig {
    pub embed_dim: usize,
    pub model_dim: usize,
    pub state_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub fourier_freqs: usize,
    pub conv_width: usize,
    /// Movement-feature parameterization of B, C, Δ; off gives the vanilla
    /// input parameterization.
    pub use_mb: bool,
    /// Chunk size of the inference scan, `0` for the plain recurrence.
    pub scan_chunk: usize,
}

impl Default for TrajMambaConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            model_dim: 64,
            state_dim: 16,
            heads: 4,
            layers: 2,
            fourier_freqs: 16,
            conv_width: 4,
            use_mb: true,
            scan_chunk: 16,
        }
    }
}

impl TrajMambaConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims {
            embed: self.embed_dim,
            model: self.model_dim,
            state: self.state_dim,
            heads: self.heads,
            conv: self.conv_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.fourier_freqs == 0 {
            return Err(Error::Config("layers and fourier_freqs must be at least 1".into()));
        }
        self.dims().validate()
    }
}

/// Point embedding followed by `L` unshared blocks and mean pooling.
#[derive(Clone, Debug)]
pub struct TrajMamba {
    pub cfg: TrajMambaConfig,
    pub embedder: PointEmbedder,
    pub blocks: Vec<TrajMambaBlock>,
}

impl TrajMamba {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, cfg: TrajMambaConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = PointEmbedder::new(store, rng, cfg.embed_dim, cfg.fourier_freqs)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            blocks.push(TrajMambaBlock::new(store, rng, &format!("block{l}"), cfg.dims(), !cfg.use_mb)?);
        }
        Ok(Self { cfg, embedder, blocks })
    }

    pub fn scan_mode(&self) -> ScanMode {
        ScanMode::from_chunk(self.cfg.scan_chunk)
    }

    /// Output rows of the last block, `rows × E`.
    pub fn forward_rows<T: Scalar>(&self, tape: &Tape<'_, T>, batch: &PackedBatch<T>) -> Result<Var> {
        let movement = tape.constant(batch.movement.clone());
        let mut z = self.embedder.forward(tape, batch)?;
        for block in &self.blocks {
            z = block.forward(tape, z, movement, &batch.layout, self.scan_mode())?;
        }
        Ok(z)
    }

    /// One embedding per trajectory, `batch × E`.
    pub fn encode<T: Scalar>(&self, tape: &Tape<'_, T>, batch: &PackedBatch<T>) -> Result<Var> {
        let z = self.forward_rows(tape, batch)?;
        tape.mean_pool(z, &batch.layout)
    }

    /// Inference embeddings, one trajectory at a time (data-parallel).
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, trajs: &[PreparedTrajectory]) -> Result<Vec<Vec<T>>> {
        par::map(trajs, |p| {
            let batch = PackedBatch::single(p)?;
            let tape = Tape::inference(store);
            let z = self.encode(&tape, &batch)?;
            let out = tape.value(z).data().to_vec();
            Ok(out)
        })
        .into_iter()
        .collect()
    }
}
