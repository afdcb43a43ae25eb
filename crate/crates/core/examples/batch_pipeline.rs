//! End to end on disk: write a synthetic dataset, hash it, then run
//! exhaustive and guided matching with several workers.

use cashash::config::RunConfig;
use cashash::pipeline::{cmd_hash, cmd_match, Dataset, MatchMode};
use cashash::synth::{write_dataset, SceneImages, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("cashash-batch-example");
    let scene = SceneImages::generate(9, SceneSpec { views: 12, points: 200, distractors: 80, sigma: 4.0 });
    let manifest = write_dataset(&dir.join("data"), &scene.images)?;

    let mut cfg = RunConfig::parse_str("block_images = 3\nblocks_per_group = 2\nworkers = 4\n")?;
    cfg.manifest = Some(manifest);
    cfg.output_dir = dir.join("out");
    let ds = Dataset::open(&cfg)?;

    let hashed = cmd_hash(&ds, &cfg)?;
    println!("hashed {} images ({} cached)", hashed.computed, hashed.cached);

    let exhaustive = cmd_match(&ds, &cfg, MatchMode::Exhaustive)?;
    print!("{}", exhaustive.to_text());
    println!();
    let guided = cmd_match(&ds, &cfg, MatchMode::Guided)?;
    print!("{}", guided.to_text());
    println!("outputs under {}", cfg.output_dir.display());
    Ok(())
}
