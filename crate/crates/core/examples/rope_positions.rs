//! Print where video and reference tokens sit in rotary index space, with and
//! without the reference shift, and check the relative-position property.
//!
//! cargo run --example rope_positions

use std::collections::HashSet;

use vidfuse::rope::{apply_rotary, reference_indices, video_indices, RopeAllocation, RopeIndex};

fn main() -> vidfuse::Result<()> {
    let (t, h, w) = (2, 3, 3);
    let video = video_indices(t, h, w)?;
    println!("video tokens (t, i, j): {:?} ... {:?}", video[0], video[video.len() - 1]);
    for shift in [true, false] {
        let refs = reference_indices(h, w, shift)?;
        let v: HashSet<RopeIndex> = video.iter().copied().collect();
        let clashes = refs.iter().filter(|r| v.contains(&RopeIndex::new(0, r.i, r.j))).count();
        println!(
            "reference shift={shift}: first {:?} last {:?}; {clashes} of {} share (i, j) with frame 0",
            refs[0],
            refs[refs.len() - 1],
            refs.len()
        );
    }
    let alloc = RopeAllocation::for_head_dim(32)?;
    println!("head_dim 32 split over (t, i, j): {:?}", (alloc.d_t, alloc.d_i, alloc.d_j));
    let q: Vec<f32> = (0..32).map(|k| ((k * 7) % 11) as f32 / 11.0 - 0.5).collect();
    let k: Vec<f32> = (0..32).map(|k| ((k * 5) % 13) as f32 / 13.0 - 0.5).collect();
    let score = |a: RopeIndex, b: RopeIndex| -> vidfuse::Result<f64> {
        let qa = &apply_rotary(&[q.clone()], &[a], &alloc)?[0];
        let kb = &apply_rotary(&[k.clone()], &[b], &alloc)?[0];
        Ok(qa.iter().zip(kb).map(|(x, y)| (*x as f64) * (*y as f64)).sum())
    };
    let (a, b) = (RopeIndex::new(1, 2, 0), RopeIndex::new(-1, 4, 3));
    for d in [0, 5, -9] {
        println!("offset {d:>3}: score {:.6}", score(a.offset(d), b.offset(d))?);
    }
    Ok(())
}
