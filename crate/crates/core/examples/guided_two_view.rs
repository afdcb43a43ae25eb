//! Two-stage matching on a synthetic two-view scene: seed matches from the
//! largest-scale features, RANSAC fundamental matrix, then guided matching
//! inside the epipolar band.

use cashash::geometry::{format_geometry_line, two_stage_match, StageConfig};
use cashash::hashing::{build_hash_family, set_centering};
use cashash::matcher::{match_pair, MatchConfig};
use cashash::synth::{SceneImages, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = SceneImages::generate(3, SceneSpec { views: 2, points: 600, distractors: 300, sigma: 4.0 });
    let (a, b) = (&scene.images[0], &scene.images[1]);
    let family = set_centering(build_hash_family(0, 8, 128, 6)?, a.descriptors.iter().chain(&b.descriptors))?;
    let (ca, cb) = (family.encode(a)?, family.encode(b)?);
    let cfg = MatchConfig::default();

    let exhaustive = match_pair(a, b, &ca, &cb, &cfg)?;
    let out = two_stage_match(a, b, &ca, &cb, &cfg, &StageConfig::default())?;
    println!("{}", format_geometry_line(&a.image_id, &b.image_id, &out.geometry));

    let truth = scene.truth(0, 1);
    let correct = |m: &[cashash::feature_io::MatchRecord]| {
        m.iter().filter(|r| truth.contains(&(r.query_index, r.train_index))).count()
    };
    println!("exhaustive: {} matches, {} correct", exhaustive.len(), correct(&exhaustive));
    println!("guided:     {} matches, {} correct", out.matches.len(), correct(&out.matches));

    let f = scene.fundamental(0, 1);
    if let Some(est) = out.geometry.fundamental {
        let diff = est.entries().iter().zip(f.entries()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("max entry difference to the true F: {diff:.2e}");
    }
    Ok(())
}
