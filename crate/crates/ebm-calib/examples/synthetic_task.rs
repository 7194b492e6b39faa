//! Generate a synthetic classification task, inspect its splits and the
//! analytic class posterior, and round-trip the dataset through JSONL.

use ebm_calib::data::{generate_task, load_split, save_split, true_posterior, TaskSpec, TokenDist};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = TaskSpec {
        n_classes: 3,
        vocab_size: 30,
        len_min: 6,
        len_max: 12,
        dist: TokenDist::Markov,
        epsilon: 0.3,
        seed: 7,
        n_train: 200,
        n_dev_pool: 80,
        ..TaskSpec::default()
    };
    let split = generate_task(&spec)?;
    println!(
        "train/dev/test sizes: {}/{}/{}",
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );

    // Label noise comes from class overlap: with epsilon > 0 the generating
    // distributions share mass, so even the true posterior is not one-hot.
    for ex in split.train.iter().take(3) {
        let post = true_posterior(&spec, &ex.tokens)?;
        let post: Vec<String> = post.iter().map(|p| format!("{p:.3}")).collect();
        println!(
            "label {} len {:2}  true posterior [{}]",
            ex.label,
            ex.tokens.len(),
            post.join(", ")
        );
    }

    let mut counts = vec![0usize; spec.n_classes];
    for ex in &split.train {
        counts[ex.label] += 1;
    }
    println!("train label counts: {counts:?}");

    let dir = std::env::temp_dir().join("ebm_calib_example_task");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("dataset.jsonl");
    save_split(&path, &split)?;
    let loaded = load_split(&path)?;
    assert_eq!(loaded.train.len(), split.train.len());
    assert_eq!(loaded.train[0].tokens, split.train[0].tokens);
    println!("saved and re-loaded {}", path.display());
    Ok(())
}
