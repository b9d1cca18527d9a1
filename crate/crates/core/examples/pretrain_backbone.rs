//! Pretrain a compact backbone on complete-modality data and save it as a
//! checkpoint.

use promptstream::backbone::{pretrain, Backbone, BackboneConfig};
use promptstream::checkpoint;
use promptstream::data::{generate_synthetic, SyntheticSpec};

fn main() -> promptstream::Result<()> {
    let spec = SyntheticSpec {
        pretrain_samples: 300,
        ..SyntheticSpec::default()
    };
    let cfg = BackboneConfig {
        num_classes: spec.num_classes,
        ..BackboneConfig::default()
    };
    println!("backbone parameters: {}", Backbone::new(&cfg)?.parameter_count());
    let data = generate_synthetic(&spec)?;
    let result = pretrain(&cfg, &data.pretrain, 5, 1e-3, 64, 0)?;
    for (i, l) in result.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {l:.4}", i + 1);
    }
    println!("train accuracy {:.3}", result.train_accuracy);
    let path = std::env::temp_dir().join("promptstream-backbone.psv");
    checkpoint::save(&path, &result.params)?;
    let back = checkpoint::load(&path)?;
    println!("checkpoint {} reloads bit-identically: {}", path.display(), back.bit_equal(&result.params));
    Ok(())
}
