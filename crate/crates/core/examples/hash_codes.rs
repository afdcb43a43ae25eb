//! Build a hash family, center it on a dataset and inspect the codes of a
//! descriptor and a noisy copy of it.

use cashash::hashing::{build_hash_family, set_centering};
use cashash::synth::{noisy_copy, rng, uniform_descriptor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = rng(1);
    let data: Vec<_> = (0..2000).map(|_| uniform_descriptor(&mut rng)).collect();
    let family = set_centering(build_hash_family(42, 8, 128, 6)?, &data)?;

    let a = data[0];
    let b = noisy_copy(&a, 8.0, &mut rng);
    let codes = family.encode_descriptors(&[a, b, data[1]])?;

    for p in 0..3 {
        let short: Vec<String> = codes.short.point(p).iter().map(|c| format!("{c:02x}")).collect();
        println!("point {p}: short [{}] long {:032x}{:032x}", short.join(" "), codes.long[p].words()[1], codes.long[p].words()[0]);
    }
    println!("hamming(a, noisy a) = {}", codes.long[0].distance(&codes.long[1]));
    println!("hamming(a, unrelated) = {}", codes.long[0].distance(&codes.long[2]));
    let shared = (0..family.tables())
        .filter(|&t| codes.short.code(0, t) == codes.short.code(1, t))
        .count();
    println!("tables with a shared bucket: {shared}/{}", family.tables());
    Ok(())
}
