//! Inference walkthrough: after the two training stages, predicting on a
//! brand-new task takes only its natural-language description. No gradient
//! steps, no examples from the new task: the hypernetwork reads the
//! description once and emits the adapter stack that specializes the frozen
//! main network.
//!
//! Run with: cargo run --release --example infer_demo

use hyperadapt::data::{gen_compositional_tasks, FamilySpec, KeywordSpec};
use hyperadapt::hypernet::{HyperConfig, Hypernetwork};
use hyperadapt::model::{concat_input, MainNetwork, ModelConfig, Vocab};
use hyperadapt::training::{train_hyper, train_main, Stage1Config, Stage2Config};

fn main() {
    // Keyword-spotting family: "output yes if the input contains X
    // otherwise no". Train tasks use some keywords, test tasks use others.
    let spec = FamilySpec::Keyword(KeywordSpec {
        n_train: 6,
        n_dev: 2,
        n_test: 2,
        examples_per_task: 32,
        min_words: 5,
        max_words: 8,
    });
    let ds = gen_compositional_tasks(&spec, 1).unwrap();
    let lines = ds.corpus_lines();
    let vocab = Vocab::from_corpus(lines.iter().map(|s| s.as_str()), 1, None);

    let mut config = ModelConfig::desk(vocab.len());
    config.max_len = 32;
    let mut net = MainNetwork::<f32>::init(config.clone(), 0).unwrap();
    let stage1 = Stage1Config { lr: 3e-4, epochs: 10, batch_size: 16, patience: 10, ..Default::default() };
    train_main(&mut net, &vocab, &ds, &stage1).unwrap();

    let mut hn = Hypernetwork::<f32>::init(HyperConfig::desk(&config), 0).unwrap();
    let stage2 = Stage2Config {
        lr: 2e-3,
        task_batch: 3,
        example_batch: 16,
        max_epochs: 30,
        patience: 30,
        ..Default::default()
    };
    train_hyper(&net, &mut hn, &vocab, &ds, &stage2).unwrap();

    // An unseen task. Its keyword never appeared as a training keyword;
    // the only signal at inference time is the description text.
    let task = &ds.test[0];
    println!("new task, never trained on: {:?}\n", task.description);

    // One adapter stack per task, generated once and reused for every input.
    let adapters = hn.generate_adapters(&vocab, &task.description).unwrap();

    println!("{:<44} {:<6} {:<6} {}", "input", "gold", "plain", "adapted");
    let mut plain_hits = 0usize;
    let mut adapted_hits = 0usize;
    let shown = task.examples.len().min(8);
    for (i, ex) in task.examples.iter().enumerate() {
        let src = concat_input(&vocab, &task.description, &ex.source, config.max_len).unwrap();
        let plain = net.greedy_decode(&vocab, None, &src, config.max_len).unwrap();
        let adapted = net.greedy_decode(&vocab, Some(&adapters), &src, config.max_len).unwrap();
        plain_hits += usize::from(plain == ex.target);
        adapted_hits += usize::from(adapted == ex.target);
        if i < shown {
            println!("{:<44} {:<6} {:<6} {}", ex.source, ex.target, plain, adapted);
        }
    }
    println!(
        "\nexact matches over {} examples: plain {plain_hits}, adapted {adapted_hits}",
        task.examples.len()
    );
}
