//! The hypernetwork's final decoder layers start at zero, so every adapter
//! it emits is initially all zeros, and a zero adapter is an exact identity
//! (its residual branch contributes ReLU(x*0+0)*0+0 = 0). This example
//! demonstrates the consequence: before any stage-2 training, the adapted
//! model is bit-for-bit the unadapted model, for any task description.
//!
//! Run with: cargo run --example identity_start

use hyperadapt::hypernet::{HyperConfig, Hypernetwork};
use hyperadapt::model::{concat_input, MainNetwork, ModelConfig, Vocab};
use hyperadapt::numerics::Rng;

fn main() {
    let corpus = [
        "return word number three of the input",
        "output yes if the input contains ocean otherwise no",
        "apple basket candle dragon engine forest garden hammer island jacket",
        "kettle ladder magnet needle ocean pencil quartz ribbon shadow temple",
    ];
    let vocab = Vocab::from_corpus(corpus.iter().copied(), 1, None);
    let config = ModelConfig::desk(vocab.len());
    let net = MainNetwork::<f32>::init(config.clone(), 3).unwrap();
    let hn = Hypernetwork::<f32>::init(HyperConfig::desk(&config), 4).unwrap();

    let descriptions = [
        "return word number three of the input",
        "output yes if the input contains ocean otherwise no",
    ];
    let sources = [
        "apple basket candle dragon engine",
        "kettle ladder magnet needle ocean",
        "shadow temple quartz ribbon pencil",
    ];

    let mut rng = Rng::new(0);
    let words: Vec<&str> = corpus[2].split(' ').chain(corpus[3].split(' ')).collect();
    let mut compared = 0usize;

    for description in descriptions {
        let adapters = hn.generate_adapters(&vocab, description).unwrap();
        let zero = adapters.0.iter().all(|a| a.is_zero());
        println!("{description:?}: generated adapters all zero = {zero}");
        assert!(zero);

        for source in sources {
            let src = concat_input(&vocab, description, source, config.max_len).unwrap();
            // Random decoder prefix: identity must hold at every position of
            // any decoding path, not just on greedy continuations.
            let dec_len = 1 + rng.usize_below(6);
            let mut dec = vec![hyperadapt::model::BOS_ID];
            for _ in 1..dec_len {
                dec.push(vocab.id(words[rng.usize_below(words.len())]));
            }

            let adapted = net.full_logits(Some(&adapters), &src, &dec).unwrap();
            let plain = net.full_logits(None, &src, &dec).unwrap();
            assert_eq!(adapted, plain, "logits must match exactly");
            compared += adapted.len();

            let a = net.greedy_decode(&vocab, Some(&adapters), &src, 8).unwrap();
            let b = net.greedy_decode(&vocab, None, &src, 8).unwrap();
            assert_eq!(a, b);
        }
    }

    println!("compared {compared} logits across decoder prefixes: all bit-identical");
    println!("greedy decodes agree too; the untrained hypernetwork is a no-op");
}
