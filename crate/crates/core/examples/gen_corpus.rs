//! Generate a small task corpus, write it with PNG dumps, and print the
//! per-task counts and manifest hash.
//!
//! cargo run --example gen_corpus -- [out_dir] [train] [eval]

use vidfuse::synth::{generate_split, manifest_hash, read_manifest, task_counts, write_samples, CorpusConfig};

fn main() -> vidfuse::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = std::path::PathBuf::from(args.first().map_or("corpus_demo", String::as_str));
    let cfg = CorpusConfig {
        train: args.get(1).map_or(10, |s| s.parse().expect("train")),
        eval: args.get(2).map_or(5, |s| s.parse().expect("eval")),
        ..Default::default()
    };
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    for (split, n) in [("train", cfg.train), ("eval", cfg.eval)] {
        let samples = generate_split(&cfg, split, n)?;
        for s in &samples {
            println!("{:<12} {:<10} \"{}\" | \"{}\"", s.id, s.task.name(), s.prompt.instruction, s.prompt.text_prompt);
        }
        write_samples(&root, split, &samples, true)?;
    }
    let records = read_manifest(&root)?;
    for (task, n) in task_counts(&records) {
        println!("{:<10} {n}", task.name());
    }
    println!("manifest sha256 {}", manifest_hash(&root)?);
    Ok(())
}
