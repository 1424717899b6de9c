// Temporary diagnostic scratch (removed before release).
use streamgp::data::{gen_synthetic, make_stream, normalize, Ordering, SyntheticKind};
use streamgp::streaming::predictive_diag;
use streamgp::trainer::{pretrain, OnlineTrainer, TrainConfig};

fn main() {
    let ds = normalize(&gen_synthetic(SyntheticKind::Sin, 500, 0.0, 7).unwrap()).unwrap();
    let stream = make_stream(&ds, Ordering::Sequential, 1, 0.05, 7).unwrap();
    let mut cfg = TrainConfig::new(20);
    cfg.lr_hyper = 0.01;
    cfg.lr_variational = 0.01;
    let state = pretrain(&stream.pretrain, &cfg).unwrap();
    println!(
        "pretrain: ls={:.3} sf2={:.3} sn2={:.5}",
        state.params.lengthscales()[0],
        state.params.signal_variance(),
        state.params.noise_variance()
    );
    let mut trainer = OnlineTrainer::from_pretrained(state, cfg, stream.pretrain.len()).unwrap();
    for (i, b) in stream.batches.iter().enumerate() {
        trainer.online_step(b).unwrap();
        if (i + 1) % 158 == 0 || i + 1 == stream.batches.len() {
            let s = trainer.state();
            println!(
                "--- after step {} (frontier x={:.2}): ls={:.3} sf2={:.3} sn2={:.5}",
                i + 1,
                b.x[(0, 0)],
                s.params.lengthscales()[0],
                s.params.signal_variance(),
                s.params.noise_variance()
            );
            let grid = nalgebra::DMatrix::from_fn(13, 1, |r, _| -1.8 + r as f64 * 0.3);
            let (mean, var) = predictive_diag(s, &grid).unwrap();
            for r in 0..13 {
                let x = grid[(r, 0)];
                let truth = {
                    let st = ds.norm_stats.as_ref().unwrap();
                    let raw = x * st.feature_sd[0] + st.feature_mean[0];
                    ((4.0 * raw).sin() - st.target_mean) / st.target_sd
                };
                println!(
                    "  x={x:>5.2} pred={:>7.3} sd={:>6.3} truth={:>7.3}",
                    mean[r],
                    var[r].sqrt(),
                    truth
                );
            }
        }
    }
}
