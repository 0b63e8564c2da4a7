//! A miniature stage-count ablation: every variant from the `stages`
//! preset, two seeds, short training.
//!
//! ```bash
//! cargo run -p crpn --example ablation
//! ```

use crpn::ablate::{ablate, line_chart_svg, stage_variants, summarize};
use crpn::detector::ModelConfig;
use crpn::synth::{generate_dataset, generate_test_set, SceneSpec};
use crpn::train::TrainConfig;

fn main() -> crpn::Result<()> {
    let spec = SceneSpec { image_size: 48, num_images: 8, test_images: 4, object_size: [12.0, 24.0], ..SceneSpec::default() };
    let (train_set, test_set) = (generate_dataset(&spec)?, generate_test_set(&spec)?);
    let mut base = ModelConfig::default();
    base.backbone.input_size = 48;
    base.backbone.channels = 8;
    base.backbone.stem_channels = 8;
    base.cascade.head_channels = 8;

    let cfg = TrainConfig { lr_schedule: vec![(40, 0.01)], max_iterations: 40, ..TrainConfig::default() };
    let rows = ablate(&stage_variants(&base), &cfg, &[0, 1], &train_set, &test_set, |row| {
        println!("{:<8} seed {} mAP {:.4}", row.variant, row.seed, row.report.map50);
    })?;
    let summary = summarize(&rows);
    for s in &summary {
        println!("{:<8} {:.4} ± {:.4}", s.variant, s.mean, s.std);
    }
    let points: Vec<(String, f64)> = summary.iter().map(|s| (s.variant.clone(), s.mean)).collect();
    let svg = line_chart_svg("mAP vs stages", "stages", "mAP@0.5", &points);
    println!("chart: {} bytes of SVG", svg.len());
    Ok(())
}
