// Scratch calibration for the sweep-grid ordering (not part of the build).
use fald::analytics::{gaussian_product_posterior, reference_step_size};
use fald::federation::{run, RecordMode, Schedule, Seeds};
use fald::metrics::variance_mse;
use fald::potentials::{generate_gaussian_set, GaussianSetParams};
use fald::samplers::LocalGradientRule;
use fald::SamplerConfig;

fn main() {
    let spread: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3.0);
    let cond: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let terms: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seed: u64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(77);
    let reps: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let set = generate_gaussian_set(&GaussianSetParams {
        clients: 10,
        dim: 5,
        seed,
        mean_spread: spread,
        condition_number: cond,
        terms_per_client: terms,
    })
    .unwrap();
    let posterior = gaussian_product_posterior(&set).unwrap();
    let x_star = posterior.mean().clone();
    let gamma_bar = reference_step_size(&posterior);
    eprintln!(
        "spread={spread} cond={cond} terms={terms} seed={seed}: gamma_bar={gamma_bar:.5} H={:.2}",
        set.heterogeneity().unwrap()
    );

    let stats = |rule: LocalGradientRule, tau: f64, p: f64, gamma: f64, block: u64| -> (f64, f64) {
        let handles: Vec<_> = (0..reps)
            .map(|rep| {
                let set = set.clone();
                let posterior = posterior.clone();
                let x_star = x_star.clone();
                std::thread::spawn(move || {
                    let cfg = SamplerConfig {
                        gamma,
                        p_comm: p,
                        q_cv: p,
                        tau,
                        batch_sizes: vec![1; 10],
                        total_iters: 200_000,
                        burn_in: 20_000,
                        thinning: 10,
                        schedule: Schedule::Bernoulli,
                        rule,
                        record: RecordMode::EveryIteration,
                        seeds: Seeds::from_base(block + rep as u64),
                    };
                    let trace = run(&cfg, &set, &x_star).unwrap();
                    variance_mse(trace.samples(), &posterior).unwrap()
                })
            })
            .collect();
        let xs: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (reps - 1) as f64;
        (mean, (var / reps as f64).sqrt())
    };

    let mut block = 0u64;
    for p in [0.2, 0.1, 0.05] {
        for mult in [0.5, 0.2, 0.1] {
            let gamma = mult * p * gamma_bar;
            let fald = stats(LocalGradientRule::Fald, 0.0, p, gamma, 10_000 + block);
            let vr0 = stats(LocalGradientRule::VrFald, 0.0, p, gamma, 20_000 + block);
            let vr1 = stats(LocalGradientRule::VrFald, 1.0, p, gamma, 30_000 + block);
            println!(
                "p={p:<5} mult={mult:<4} gamma={gamma:.2e}  FALD {:.3e}+-{:.1e}  VR0 {:.3e}+-{:.1e}  VR1 {:.3e}+-{:.1e}  {}",
                fald.0, fald.1, vr0.0, vr0.1, vr1.0, vr1.1,
                if vr0.0 < fald.0 && vr1.0 < fald.0 { "ok" } else { "VIOLATION" }
            );
            block += 100;
        }
    }
}
