//! Cascade matching of one image pair against the brute-force reference.

use std::time::Instant;

use cashash::hashing::{build_hash_family, set_centering};
use cashash::matcher::{brute_force_match, match_pair, MatchConfig};
use cashash::pipeline::score_matches;
use cashash::synth::RecallScenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = RecallScenario::generate(7, 1000, 9000, 8.0);
    let all = s.queries.descriptors.iter().chain(&s.train.descriptors);
    let family = set_centering(build_hash_family(0, 8, 128, 6)?, all)?;
    let (cq, ct) = (family.encode(&s.queries)?, family.encode(&s.train)?);

    for tau in [16, 40, 128] {
        let cfg = MatchConfig { hamming_threshold: tau, ..Default::default() };
        let t0 = Instant::now();
        let matches = match_pair(&s.queries, &s.train, &cq, &ct, &cfg)?;
        let correct = matches.iter().filter(|m| s.truth[m.query_index as usize] == m.train_index).count();
        println!("tau {tau:>3}: {} matches, {correct} correct, {:.1} ms", matches.len(), t0.elapsed().as_secs_f64() * 1e3);
    }

    let t0 = Instant::now();
    let oracle = brute_force_match(&s.queries, &s.train, 0.8);
    let brute_ms = t0.elapsed().as_secs_f64() * 1e3;
    let cascade = match_pair(&s.queries, &s.train, &cq, &ct, &MatchConfig::default())?;
    let score = score_matches((0, 1), &cascade, &oracle);
    println!(
        "brute force: {} matches in {brute_ms:.1} ms; recall {:.4} precision {:.4}",
        oracle.len(),
        score.recall(),
        score.precision()
    );
    Ok(())
}
