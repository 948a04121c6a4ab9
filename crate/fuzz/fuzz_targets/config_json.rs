#![no_main]

use lgcn_core::config::ModelConfig;
use lgcn_core::train::TrainConfig;
use libfuzzer_sys::fuzz_target;
use serde::Deserialize;

/// Same shape as the CLI run config.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<RunConfig>(data) {
        let _ = cfg.model.validate();
        let _ = cfg.train.validate();
    }
});
