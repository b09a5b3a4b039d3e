//! Verifies analytic gradients against central finite differences, in f64,
//! for both trainable parameter sets:
//!
//! 1. the main network's own parameters (stage-1 style loss), and
//! 2. the hypernetwork's parameters with gradients flowing through the
//!    generated adapters into the frozen main network (stage-2 style loss).
//!
//! Run with: cargo run --example grad_check

use hyperadapt::hypernet::{HyperConfig, Hypernetwork};
use hyperadapt::model::{concat_input, MainNetwork, ModelConfig, Vocab};
use hyperadapt::numerics::{grad_check, Graph, NumericsError, ParamStore, Rng};

fn main() {
    let corpus = [
        "return word number one of the input",
        "output yes if the input contains river otherwise no",
        "apple basket candle dragon engine forest garden hammer",
        "island jacket kettle ladder magnet needle ocean pencil",
    ];
    let vocab = Vocab::from_corpus(corpus.iter().copied(), 1, None);
    println!("vocab: {} tokens", vocab.len());

    let config = ModelConfig::tiny(vocab.len());
    let src = concat_input(&vocab, "return word number one", "apple basket candle", config.max_len)
        .unwrap();
    let tgt = vocab.tokenize("apple");

    // Stage 1: loss as a function of the main network's parameters.
    let net = MainNetwork::<f64>::init(config.clone(), 7).unwrap();
    let mc = net.config.clone();
    let mut store = net.params.clone();
    let (s1_src, s1_tgt) = (src.clone(), tgt.clone());
    let loss_fn = move |s: &mut ParamStore<f64>| {
        s.zero_grads();
        let view = MainNetwork { config: mc.clone(), params: s.clone() };
        let mut g = Graph::new();
        let (loss, _) = view
            .build_example_loss(&mut g, None, &s1_src, &s1_tgt)
            .map_err(|e| NumericsError::Invalid(e.to_string()))?;
        g.backward(loss)?;
        g.export_grads(s)?;
        Ok(g.value(loss).scalar())
    };
    let mut rng = Rng::new(0);
    let report = grad_check(&mut store, loss_fn, 200, &mut rng).unwrap();
    println!(
        "stage 1: {} coordinates checked, max relative error {:.3e}",
        report.checked, report.max_rel_err
    );
    if let Some(worst) = &report.worst {
        println!("         worst coordinate: {worst:?}");
    }
    assert!(report.max_rel_err < 1e-4);

    // Stage 2: loss as a function of the hypernetwork's parameters, with a
    // random final decoder layer so adapter outputs are nonzero.
    let mut hc = HyperConfig::tiny(&config);
    hc.zero_final_init = false;
    let hn = Hypernetwork::<f64>::init(hc, 11).unwrap();
    let desc_ids = vocab.tokenize("return word number one");
    let hcfg = hn.config.clone();
    let mut store = hn.params.clone();
    let loss_fn = move |s: &mut ParamStore<f64>| {
        s.zero_grads();
        let view = Hypernetwork { config: hcfg.clone(), params: s.clone() };
        let mut g = Graph::new();
        let mut run = || -> Result<hyperadapt::numerics::Var, String> {
            let vars = view.build_adapters(&mut g, &desc_ids).map_err(|e| e.to_string())?;
            let (loss, _) = net
                .build_example_loss(&mut g, Some(&vars), &src, &tgt)
                .map_err(|e| e.to_string())?;
            Ok(loss)
        };
        let loss = run().map_err(NumericsError::Invalid)?;
        g.backward(loss)?;
        g.export_grads(s)?;
        Ok(g.value(loss).scalar())
    };
    let mut rng = Rng::new(1);
    let report = grad_check(&mut store, loss_fn, 200, &mut rng).unwrap();
    println!(
        "stage 2: {} coordinates checked, max relative error {:.3e}",
        report.checked, report.max_rel_err
    );
    if let Some(worst) = &report.worst {
        println!("         worst coordinate: {worst:?}");
    }
    assert!(report.max_rel_err < 1e-4);

    println!("both parameter sets agree with finite differences to < 1e-4");
}
