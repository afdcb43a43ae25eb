//! The dot-product reduction switch point: how many halving rounds are
//! replaced by a sequential sum. Results are exact for integer inputs at
//! every setting; only speed changes.

use cashash::hashing::reduce_dot;
use cashash::pipeline::{cmd_bench_reduce, format_reduce_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a: Vec<f32> = (0..128).map(|i| (i % 17) as f32).collect();
    let b: Vec<f32> = (0..128).map(|i| (i % 5) as f32 - 2.0).collect();
    for r in 0..=7 {
        println!("N_r = {r}: {}", reduce_dot(&a, &b, r)?);
    }

    let x: Vec<f32> = (0..128).map(|i| (i as f32 * 0.37).sin()).collect();
    let y: Vec<f32> = (0..128).map(|i| (i as f32 * 0.11).cos()).collect();
    for r in [0, 3, 7] {
        println!("real inputs, N_r = {r}: {:.9}", reduce_dot(&x, &y, r)?);
    }

    print!("{}", format_reduce_csv(&cmd_bench_reduce(100_000, 0)?));
    Ok(())
}
