//! Saves a training snapshot midway, resumes it into a fresh store and
//! confirms the continuation matches the uninterrupted run.
//!
//! ```bash
//! cargo run -p crpn --example snapshot_resume
//! ```

use crpn::detector::{Detector, ModelConfig};
use crpn::params::ParamStore;
use crpn::synth::{generate_dataset, SceneSpec};
use crpn::train::{init_rng, train, TrainConfig, TrainState};

fn model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.backbone.input_size = 48;
    m.backbone.channels = 8;
    m.backbone.stem_channels = 8;
    m.cascade.head_channels = 8;
    m
}

fn main() -> crpn::Result<()> {
    let data = generate_dataset(&SceneSpec { image_size: 48, num_images: 4, object_size: [12.0, 24.0], ..SceneSpec::default() })?;
    let cfg = TrainConfig { lr_schedule: vec![(10, 0.01), (10, 0.001)], max_iterations: 20, ..TrainConfig::default() };
    let snap = std::env::temp_dir().join("crpn_resume_example.snap");

    let mut store = ParamStore::new();
    let det = Detector::new(&model(), &mut store, &mut init_rng(0))?;
    let mut full = TrainState::new(store);
    let rows = train(&det, &mut full, &data, &cfg, |row, st| if row.iteration == 9 { st.save(&snap) } else { Ok(()) })?;

    let mut template = ParamStore::new();
    let det2 = Detector::new(&model(), &mut template, &mut init_rng(123))?;
    let mut resumed = TrainState::load(&snap, template)?;
    println!("resuming at iteration {}", resumed.iteration);
    let tail = train(&det2, &mut resumed, &data, &cfg, |_, _| Ok(()))?;

    let same = tail == rows[10..] && resumed.params.named_tensors() == full.params.named_tensors();
    println!("continuation identical to the uninterrupted run: {same}");
    Ok(())
}
