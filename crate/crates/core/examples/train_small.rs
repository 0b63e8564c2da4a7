//! Trains a reduced detector on 48×48 scenes for a few hundred iterations,
//! then evaluates it on held-out scenes.
//!
//! ```bash
//! cargo run -p crpn --example train_small
//! ```

use crpn::detector::{Detector, ModelConfig};
use crpn::eval::evaluate_model;
use crpn::params::ParamStore;
use crpn::synth::{generate_dataset, generate_test_set, SceneSpec};
use crpn::train::{init_rng, train, TrainConfig, TrainState};

fn main() -> crpn::Result<()> {
    let spec = SceneSpec { image_size: 48, num_images: 24, test_images: 8, object_size: [12.0, 24.0], ..SceneSpec::default() };
    let (train_set, test_set) = (generate_dataset(&spec)?, generate_test_set(&spec)?);

    let mut model = ModelConfig::default();
    model.backbone.input_size = 48;
    model.backbone.channels = 8;
    model.backbone.stem_channels = 8;
    model.cascade.head_channels = 8;

    let mut store = ParamStore::new();
    let det = Detector::new(&model, &mut store, &mut init_rng(0))?;
    let mut state = TrainState::new(store);
    let cfg = TrainConfig { lr_schedule: vec![(300, 0.01), (100, 0.001)], max_iterations: 400, ..TrainConfig::default() };
    train(&det, &mut state, &train_set, &cfg, |row, _| {
        if row.iteration % 50 == 0 {
            let l = &row.report.loss;
            println!("iter {:>3}  lr {:<6} total {:.4}  rpn cls {:?}", row.iteration, row.lr, l.detection_total, l.per_stage_cls);
        }
        Ok(())
    })?;

    let report = evaluate_model(&det, &state.params, &test_set)?;
    println!("{}", report.summary());
    Ok(())
}
