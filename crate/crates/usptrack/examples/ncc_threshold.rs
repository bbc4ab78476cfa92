//! Times direct and FFT NCC matching across patch sizes and search radii.
//! The `auto` method's `ncc.fft_cost_ratio` is fitted to this table.
//!
//! cargo run --release -p usptrack --example ncc_threshold

use std::time::Instant;

use usptrack::core::baselines::{match_template, patch_at, NccConfig, NccMethod};
use usptrack::core::simulator::speckle_image;

fn time(cfg: &NccConfig, reps: usize) -> f64 {
    let a = speckle_image(256, 256, 1);
    let b = speckle_image(256, 256, 2);
    let half = (cfg.patch_size / 2) as isize;
    let tpl = patch_at(&a, 128 - half, 128 - half, cfg.patch_size).unwrap();
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(match_template(&tpl, 128, 128, &b, cfg));
    }
    start.elapsed().as_secs_f64() / reps as f64 * 1e6
}

fn main() {
    println!("patch\tradius\tdirect_us\tfft_us\tauto_picks");
    for patch in [9usize, 17, 25, 33] {
        for radius in [2usize, 4, 8, 16, 24, 32, 48, 64, 96] {
            let base = NccConfig { patch_size: patch, search_radius: radius, ..Default::default() };
            let reps = 2000 / (radius + 1);
            let d = time(&NccConfig { method: NccMethod::Direct, ..base.clone() }, reps);
            let f = time(&NccConfig { method: NccMethod::Fft, ..base.clone() }, reps);
            let side = (2 * radius + patch).min(256);
            let pick = if base.use_fft(side, side) { "fft" } else { "direct" };
            println!("{patch}\t{radius}\t{d:.1}\t{f:.1}\t{pick}");
        }
    }
}
