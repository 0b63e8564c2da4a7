//! Parses a run configuration from TOML and shows the resolved model.
//!
//! ```bash
//! cargo run -p crpn --example run_config
//! ```

use crpn::config::RunConfig;

const TEXT: &str = r#"
output_dir = "runs/chains_off"

[cascade]
T = 4
r = 0.99
feature_chain = false
score_chain = false

[train]
lr_schedule = [[1500, 0.01], [500, 0.001]]
seed = 2
"#;

fn main() -> crpn::Result<()> {
    let cfg = RunConfig::parse(TEXT)?;
    let model = cfg.model();
    println!("stages {} r {} chains {}/{}", model.cascade.stages, model.cascade.r, model.cascade.feature_chain, model.cascade.score_chain);
    println!("batches {:?}, taps {:?}", model.cascade.batches(), model.cascade.taps());
    println!("train {:?}", cfg.train);

    match RunConfig::parse("[cascade]\nlamda_f = 0.2\n") {
        Ok(_) => println!("typo accepted?"),
        Err(e) => println!("typo rejected: {e}"),
    }
    Ok(())
}
