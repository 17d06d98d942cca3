//! Draw condition-dropout outcomes and compare the empirical drop rates with
//! the policy.
//!
//! cargo run --example condition_routing -- [draws]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidfuse::fusion::{route, DropoutPolicy, Presence};

fn main() -> vidfuse::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(10_000, |s| s.parse().expect("draws"));
    let policy = DropoutPolicy::default();
    let all = Presence { mask: true, pose: true, reference: true, text: true };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dropped = [0usize; 4];
    let mut kept_all = 0;
    for _ in 0..n {
        let p = route(all, &mut rng, &policy)?;
        let flags = [p.mask, p.pose, p.reference, p.text];
        kept_all += usize::from(flags.iter().all(|&f| f));
        for (d, f) in dropped.iter_mut().zip(flags) {
            *d += usize::from(!f);
        }
    }
    let want = [policy.p_mask, policy.p_pose, policy.p_reference, policy.p_text];
    for ((name, d), p) in ["mask", "pose", "reference", "text"].iter().zip(dropped).zip(want) {
        println!("{name:<10} dropped {:.4} (policy {p})", d as f64 / n as f64);
    }
    println!("all streams kept in {:.4} of draws; none dropped all", kept_all as f64 / n as f64);
    Ok(())
}
