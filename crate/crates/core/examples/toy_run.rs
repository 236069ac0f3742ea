//! Trains on a toy dataset and prints held-out accuracy against the PCA
//! baseline. Knobs come from environment variables.

use std::time::Instant;

use densecorr::autonet::ModelConfig;
use densecorr::evalmetrics::{per_vertex_error, LinearModel};
use densecorr::losses::LossContext;
use densecorr::synthgen::{build_toy_model, sample_subjects, ToyConfig};
use densecorr::training::{infer_correspondence, toy_training_set, RunConfig, ToyMix};

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> densecorr::Result<()> {
    let toy = ToyConfig {
        seed: env("TOY_SEED", 0),
        n: env("N", 642),
        k_id: env("K_ID", 6),
        k_exp: env("K_EXP", 4),
        gamma: env("GAMMA", 0.3),
    };
    let train_subjects: usize = env("TRAIN", 40);
    let test_subjects: usize = env("TEST", 10);
    let expressions: usize = env("EXPR", 4);
    let model_toy = build_toy_model(&toy)?;
    let train = sample_subjects(&model_toy, 0..train_subjects, expressions, 1)?;
    let test = sample_subjects(&model_toy, train_subjects..train_subjects + test_subjects, expressions, 1)?;

    let mut config = RunConfig {
        seed: env("SEED", 0),
        synthetic_epochs: env("EPOCHS", 10),
        mixed_epochs: env("EPOCHS", 10),
        ..RunConfig::default()
    };
    config.lr.initial = env("LR", 1e-4);
    config.lr.restart = match std::env::var("RESTART").as_deref() {
        Ok("phase") => densecorr::training::LrRestart::Phase,
        Ok("run") => densecorr::training::LrRestart::Run,
        _ => densecorr::training::LrRestart::Stage,
    };
    config.model = ModelConfig {
        vertex_count: toy.n,
        latent_id: env("LATENT_ID", 6),
        latent_exp: env("LATENT_EXP", 4),
        encoder_widths: vec![64, 64, 128, env("POOL", 1024)],
        decoder_hidden: env("HIDDEN", 1024),
        anchor_zero_expression: env("ANCHOR", false),
    };
    let template = model_toy.template.clone();
    let ctx = LossContext::new(&template, config.loss)?;
    let mix = ToyMix {
        real_every: env("REAL_EVERY", 2),
        neutral_repeats: env("REPEATS", 1),
        ..ToyMix::default()
    };
    let data = toy_training_set(&train, &ctx, &mix)?;
    let start = Instant::now();
    let (model, log) = densecorr::training::train_full(&template, &data, &config, &mut |r, _| {
        eprintln!(
            "{:?} {:?} epoch {} lr {:.2e} loss {:.5} flying {:.1} ({:.0}s)",
            r.phase,
            r.stage,
            r.epoch,
            r.lr,
            r.mean_loss,
            r.mean_flying,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    eprintln!("switches: {}", log.switch_count());

    let mut model_err = 0.0;
    for s in &test {
        let c = infer_correspondence(&model, &s.input, &template)?;
        model_err += per_vertex_error(c.mesh.vertices(), &s.ground_truth)?.mean;
    }
    model_err /= test.len() as f64;
    let mut train_err = 0.0;
    let mut neutral_err = 0.0;
    let probe = &train[..train.len().min(50)];
    for s in probe {
        let c = infer_correspondence(&model, &s.input, &template)?;
        let e = per_vertex_error(c.mesh.vertices(), &s.ground_truth)?.mean;
        train_err += e;
    }
    train_err /= probe.len() as f64;
    let mut count = 0;
    for s in test.iter().filter(|s| s.neutral) {
        let c = infer_correspondence(&model, &s.input, &template)?;
        neutral_err += per_vertex_error(c.mesh.vertices(), &s.ground_truth)?.mean;
        count += 1;
    }
    neutral_err /= count.max(1) as f64;
    eprintln!("train {train_err:.5} test-neutral {neutral_err:.5}");
    let shapes: Vec<_> = train.iter().map(|s| s.ground_truth.clone()).collect();
    let pca = LinearModel::fit(&shapes, config.model.latent_id)?;
    let mut pca_err = 0.0;
    for s in &test {
        pca_err += per_vertex_error(&s.ground_truth, &pca.reconstruct(&s.ground_truth)?)?.mean;
    }
    pca_err /= test.len() as f64;
    let mut spread = 0.0;
    let mut pairs = 0;
    for a in &test {
        for b in &test {
            if a.subject < b.subject {
                spread += per_vertex_error(&a.ground_truth, &b.ground_truth)?.mean;
                pairs += 1;
            }
        }
    }
    spread /= pairs as f64;
    println!(
        "model {model_err:.5} pca {pca_err:.5} spread {spread:.5} ratio {:.3} time {:.0}s",
        model_err / spread,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
