use lmlab_core::lab::{train_examples, MetricsLog, OptimConfig};
use lmlab_core::model::{ModelConfig, ModelParams};
use lmlab_core::objectives::sft_example;
use lmlab_core::tensor::Tape;

#[test]
fn single_sft_example_memorizes() {
    let cfg = ModelConfig::tiny(16);
    let mut params = ModelParams::init(cfg, 3).unwrap();
    let ex = sft_example(&[1, 9, 2], &[9]).unwrap();
    eprintln!("tokens {:?} targets {:?} mask {:?}", ex.tokens, ex.targets, ex.loss_mask);
    let optim = OptimConfig { rate: 0.1, momentum: 0.9, steps: 300, batch: 1, seed: 5 };
    let mut log = MetricsLog::new();
    train_examples(&mut params, std::slice::from_ref(&ex), &optim, "dbg", &mut log).unwrap();
    for i in [0usize, 50, 100, 200, 299] {
        eprintln!("step {i}: {}", log.lines[i]);
    }
    // Finite-difference check on one embedding weight through the masked loss.
    let mut tape = Tape::new();
    let pv = params.leaf_all(&mut tape, true);
    let (loss, _) = ex.loss(&mut tape, &params, &pv).unwrap();
    tape.backward(loss).unwrap();
    let idx = params.index_of("embed.tok").unwrap();
    let g = tape.grad(pv.vars[idx]).unwrap()[9 * 32 + 3];
    let h = 1e-5;
    let mut probe = |delta: f64| {
        let mut p2 = params.clone();
        p2.update(idx, |w| w[9 * 32 + 3] += delta);
        let mut t2 = Tape::new();
        let pv2 = p2.leaf_all(&mut t2, false);
        let (l2, _) = ex.loss(&mut t2, &p2, &pv2).unwrap();
        t2.value(l2).data()[0]
    };
    let fd = (probe(h) - probe(-h)) / (2.0 * h);
    eprintln!("analytic {g} fd {fd}");
    assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "grad mismatch: {g} vs {fd}");
}
