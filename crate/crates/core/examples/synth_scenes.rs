//! Renders a few synthetic scenes, writes them as PPM plus an annotation
//! file, and reports the anchor imbalance they induce.
//!
//! ```bash
//! cargo run -p crpn --example synth_scenes -- /tmp/scenes
//! ```

use std::path::PathBuf;

use crpn::annotations::{read_annotations, write_annotations};
use crpn::detector::{Detector, ModelConfig};
use crpn::params::ParamStore;
use crpn::synth::{generate_dataset, imbalance, SceneSpec};
use crpn::train::init_rng;

fn main() -> crpn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("crpn_scenes"));
    let spec = SceneSpec { num_images: 8, ..SceneSpec::default() };
    let records = generate_dataset(&spec)?;
    write_annotations(&records, &out)?;
    for (i, r) in records.iter().enumerate().take(3) {
        println!("image {i}: {:?}", r.gts);
    }

    let back = read_annotations(&out)?;
    println!("wrote and re-read {} images under {}", back.len(), out.display());

    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg, &mut store, &mut init_rng(0))?;
    let im = imbalance(&records, det.anchors(), &cfg.cascade);
    println!(
        "{} positive, {} negative, {} ignored anchors; negative:positive {:.1}:1",
        im.positives,
        im.negatives,
        im.ignored,
        im.ratio()
    );
    Ok(())
}
