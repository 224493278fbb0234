//! Versioned JSON checkpoints.
//!
//! A checkpoint stores the model configuration, the flat parameter vector in
//! registration order, the frozen Fourier-feature frequencies of every INR,
//! and the training RNG state. The model is rebuilt from the configuration
//! (parameter layout does not depend on the seed) and then overwritten.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};
use crate::layers::{ModelConfig, NfmModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: Vec<f64>,
    pub inr_freqs: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn capture(model: &NfmModel, rng: &ChaCha8Rng, step: u64, config_hash: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: model.cfg.clone(),
            params: model.store.flatten(),
            inr_freqs: model.inr_freqs(),
            rng: rng.clone(),
            step,
            config_hash: config_hash.to_owned(),
        }
    }

    pub fn restore(&self) -> Result<NfmModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(NfmError::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut model = NfmModel::new(self.model.clone(), 0)?;
        model.store.load_flat(&self.params)?;
        model.set_inr_freqs(&self.inr_freqs)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| NfmError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::manip::ExtensionFactors;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_preserves_predictions_and_rng() {
        let model = NfmModel::new(ModelConfig::anomaly(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _: u64 = rng.random();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::capture(&model, &rng, 7, "abc").save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let restored = ck.restore().unwrap();
        assert_eq!(restored, model);
        let mut r2 = ck.rng.clone();
        assert_eq!(r2.random::<u64>(), rng.random::<u64>());

        let x = Tensor::new(vec![2, 10, 1], (0..20).map(|i| (i as f64).cos()).collect()).unwrap();
        let f = ExtensionFactors::upsample(2).unwrap();
        assert_eq!(model.predict(&x, &f).unwrap(), restored.predict(&x, &f).unwrap());
    }

    #[test]
    fn version_and_shape_mismatch_rejected() {
        let model = NfmModel::new(ModelConfig::anomaly(), 0).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(0);
        let mut ck = Checkpoint::capture(&model, &rng, 0, "");
        ck.format_version = 99;
        assert!(ck.restore().is_err());
        let mut ck = Checkpoint::capture(&model, &rng, 0, "");
        ck.params.pop();
        assert!(matches!(ck.restore(), Err(NfmError::Checkpoint(_))));
    }
}
