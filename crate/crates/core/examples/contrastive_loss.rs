//! Minimise the contrastive loss alone and watch the positive pairs of
//! task-aware embeddings separate from the other tasks.

use promptstream::losses::{contrastive_loss, cosine_sim, ContrastiveConfig, TaskEmbeddings};
use promptstream::optim::{AdamState, ParameterSet};
use promptstream::prompts::{PromptConfig, PromptPool, TaskId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sim(emb: &TaskEmbeddings, i: u8, j: u8) -> f64 {
    let id = |t| TaskId::new(t).unwrap();
    cosine_sim(emb.get(id(i)).unwrap(), emb.get(id(j)).unwrap()).unwrap().item()
}

/// Mean similarity of an anchor to the tasks outside its pair, skipping task 1.
fn negatives(emb: &TaskEmbeddings, i: u8, j: u8) -> f64 {
    let others: Vec<u8> = (2..=7).filter(|&t| t != i && t != j).collect();
    others.iter().map(|&t| sim(emb, i, t)).sum::<f64>() / others.len() as f64
}

fn main() {
    let prompt_cfg = PromptConfig {
        length: 4,
        init_std: 0.5,
        ..PromptConfig::default()
    };
    let loss_cfg = ContrastiveConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::new();
    let pool = PromptPool::init(&prompt_cfg, 8, 8, &mut rng, &mut params).unwrap();
    let mut adam = AdamState::new(1e-2);
    for step in 0..=200 {
        let emb = TaskEmbeddings::from_pool(&pool, &params).unwrap();
        let loss = contrastive_loss(&emb, &loss_cfg).unwrap();
        if step % 40 == 0 {
            println!(
                "step {step:3}  L_con {:+.4}  sim(2,4) {:+.3} vs negatives {:+.3}  sim(5,7) {:+.3} vs negatives {:+.3}",
                loss.item(),
                sim(&emb, 2, 4),
                negatives(&emb, 2, 4),
                sim(&emb, 5, 7),
                negatives(&emb, 5, 7)
            );
        }
        loss.backward().unwrap();
        adam.step(&mut params).unwrap();
    }
}
