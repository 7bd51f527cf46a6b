//! Scratch harness: trains small models on the fixed-RBF prior at a few
//! budgets and reports held-out NLL and posterior-mean RMSE against the
//! exact GP, to size the desk-scale configs.

use ndarray::Array2;
use pfnbo::oracle::{GpPosterior, KernelSpec};
use pfnbo::pfn::{
    build_layout_from_prior, loss_on_batch, train, PfnConfig, PlainPriorProvider, StyleInput,
    StyleVocab,
};
use pfnbo::priors::{BatchConfig, PriorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let emb: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let datasets: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

    let batch_size = 64;
    let cfg = PfnConfig {
        embed_dim: emb,
        num_layers: layers,
        num_heads: 4,
        ff_dim: emb * 2,
        capacity: 1,
        num_buckets: 100,
        style: StyleVocab::None,
        step_size: lr,
        batch_size,
        total_steps: datasets / batch_size,
        warmup_frac: 0.02,
        min_points: 1,
        max_points: 60,
        layout_samples: 100_000,
        checkpoint_every: 0,
    };
    let batch = BatchConfig {
        prior: PriorConfig::simple_gp(),
        capacity: 1,
        max_dim: 1,
        min_points: 1,
        max_points: 60,
        group_size: 8,
    };
    let layout = build_layout_from_prior(&batch, cfg.num_buckets, cfg.layout_samples, 7).unwrap();
    let provider = PlainPriorProvider::new(batch.clone(), cfg.style);

    let t0 = Instant::now();
    let (model, report) = train(&provider, layout, cfg, 7, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    // Held-out evaluation tasks.
    let kernel = KernelSpec::default_rbf();
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let mut nll_pfn = 0.0;
    let mut nll_gp = 0.0;
    let mut se_sum = 0.0;
    let mut count = 0usize;
    let tasks = 200;
    for _ in 0..tasks {
        let n_ctx = rng.gen_range(1..=50);
        let n_query = 20;
        let sampler = batch.prior.sampler();
        let ds = sampler.sample(n_ctx + n_query, 1, &mut rng).unwrap();
        let ctx_x = ds.x.slice(ndarray::s![..n_ctx, ..]).to_owned();
        let ctx_y = ds.y[..n_ctx].to_vec();
        let q_x = ds.x.slice(ndarray::s![n_ctx.., ..]).to_owned();
        let q_y = &ds.y[n_ctx..];

        let dists = model
            .forward(ctx_x.view(), &ctx_y, q_x.view(), &StyleInput::None)
            .unwrap();
        let rows: Vec<Vec<f64>> = ctx_x.rows().into_iter().map(|r| r.to_vec()).collect();
        let gp = GpPosterior::fit(kernel.clone(), &rows, &ctx_y).unwrap();
        for (i, d) in dists.iter().enumerate() {
            nll_pfn -= d.log_prob(q_y[i]);
            let (mean, var) = gp.predict(&q_x.row(i).to_vec());
            let noise_var = var + kernel.noise();
            nll_gp += 0.5 * ((q_y[i] - mean).powi(2) / noise_var
                + noise_var.ln()
                + (2.0 * std::f64::consts::PI).ln());
            se_sum += (d.mean() - mean).powi(2);
            count += 1;
        }
    }
    let _ = Array2::<f64>::zeros((1, 1));
    println!(
        "emb={emb} layers={layers} datasets={datasets} lr={lr}: train {train_secs:.0}s, tail CE {:.4}, NLL pfn {:.4} gp {:.4}, mean-RMSE {:.4}",
        report.tail_mean_ce(50),
        nll_pfn / count as f64,
        nll_gp / count as f64,
        (se_sum / count as f64).sqrt()
    );
}
