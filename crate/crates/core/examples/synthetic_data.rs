//! Generate the synthetic missing-modality benchmark, write it to a
//! directory and read it back.
//!
//! Usage: `cargo run --example synthetic_data [OUT_DIR]`

use std::path::PathBuf;

use promptstream::data::{generate_synthetic, read_dataset, write_dataset, SyntheticSpec};
use promptstream::prompts::Modality;

fn main() -> promptstream::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("promptstream-data"));
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec)?;
    let manifest = write_dataset(&out, &spec, &data)?;
    println!("wrote {} (spec hash {})", out.display(), &manifest.spec_hash[..12]);
    println!("pretrain: {} complete samples", data.pretrain.len());

    let (_, back) = read_dataset(&out)?;
    for split in &back.tasks {
        let missing: Vec<&str> = Modality::ALL
            .iter()
            .filter(|m| split.task.pattern().is_missing(**m))
            .map(|m| m.name())
            .collect();
        println!(
            "task {}: {} train / {} test, missing {:?}",
            split.task,
            split.train.len(),
            split.test.len(),
            missing
        );
    }
    Ok(())
}
