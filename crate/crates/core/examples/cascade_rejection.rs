//! Feature and score chains on an untrained cascade, and how many anchors
//! each stage rejects at a few thresholds.
//!
//! ```bash
//! cargo run -p crpn --example cascade_rejection
//! ```

use crpn::cascade::{inference_active, CascadeConfig};
use crpn::detector::{inference_rejection, Detector, ModelConfig};
use crpn::params::ParamStore;
use crpn::synth::{generate_dataset, SceneSpec};
use crpn::train::init_rng;

fn main() -> crpn::Result<()> {
    let image = generate_dataset(&SceneSpec { num_images: 1, ..SceneSpec::default() })?.remove(0).image;
    for r in [0.5, 0.51, 0.99] {
        let cfg = ModelConfig {
            cascade: CascadeConfig { r, head_init_std: 0.3, ..CascadeConfig::default() },
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let det = Detector::new(&cfg, &mut store, &mut init_rng(1))?;
        let (chained, raw) = det.stage_scores(&store, &image)?;
        let active = inference_active(&chained, r);
        let counts: Vec<usize> = active.iter().map(|m| m.iter().filter(|&&a| a).count()).collect();
        let rates: Vec<String> = inference_rejection(&chained, r).iter().map(|x| format!("{x:.3}")).collect();
        println!("r = {r}: active per stage {counts:?}, rejection [{}]", rates.join(", "));
        println!("  anchor 0 raw {:?}", raw.iter().map(|s| s[0][0]).collect::<Vec<_>>());
        println!("  anchor 0 chained {:?}", chained.iter().map(|s| s[0][0]).collect::<Vec<_>>());
    }
    Ok(())
}
