//! Scratch calibration runs for the attack settings. Not part of the suite.

use leaklab_core::attack::{run_attack, AttackConfig, AttackMethod, OptimizerKind};
use leaklab_core::data::{synth_dataset, SynthKind};
use leaklab_core::metrics::{gradient_distance, median, psnr, GradMetric};
use leaklab_core::model::{convnet, init_params, loss_and_param_grads, mlp, InitScheme};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "fc".to_string());
    let iters: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    match which.as_str() {
        "fc" => fc_plateau(iters),
        "conv" => conv_gap(iters),
        "mul" => mu_l(iters),
        _ => eprintln!("unknown probe"),
    }
}

fn fc_plateau(iters: usize) {
    // MNIST-scale: 3-layer FC, wide uniform init, B=1, averaged over samples
    let r = env_f64("WU", 0.5);
    let h1 = env_usize("H1", 128);
    let h2 = env_usize("H2", 64);
    let samples = env_usize("SAMPLES", 1);
    let model = mlp(&[1, 28, 28], &[h1, h2], 10).unwrap();
    let data = synth_dataset(SynthKind::Blobs, 16, &[1, 28, 28], 10, 5).unwrap();
    println!("params: {}", model.parameter_count());

    for method in [AttackMethod::L2, AttackMethod::FedLeak] {
        let t0 = Instant::now();
        let mut gds = Vec::new();
        let mut rms = Vec::new();
        let mut psnrs = Vec::new();
        let mut ratios_all = Vec::new();
        for s in 0..samples {
            let params = init_params(
                &model,
                &InitScheme::WideUniform { low: -r, high: r },
                env_usize("PSEED", 0) as u64,
            );
            let batch = data.batch_of(&[s]).unwrap();
            let lg =
                loss_and_param_grads(&model, &params, &batch.images, &batch.labels).unwrap();
            let ghat = lg.grads.flatten();
            let cfg = AttackConfig {
                method,
                iterations: iters,
                seed: 42 + s as u64,
                step_size: env_f64("ETA", 1e-4),
                schedule: if std::env::var("ANNEAL").is_ok() {
                    leaklab_core::attack::Schedule::CosineAnnealing { period: iters + 1 }
                } else {
                    leaklab_core::attack::Schedule::Constant
                },
                ..AttackConfig::default()
            };
            let out =
                run_attack(&model, &params, &ghat, &batch.labels, &cfg, Some(&batch.images))
                    .unwrap();
            let g2 =
                loss_and_param_grads(&model, &params, &out.final_x, &batch.labels).unwrap();
            let gd = gradient_distance(&g2.grads.flatten(), &ghat, GradMetric::L2).unwrap();
            gds.push(gd);
            rms.push(gd / (ghat.len() as f64).sqrt());
            psnrs.push(psnr(&out.final_x, &batch.images).unwrap());
            let mut rr: Vec<f64> = out.records.iter().filter_map(|r| r.two_mu_over_l).collect();
            ratios_all.append(&mut rr);
        }
        let el = t0.elapsed().as_secs_f64();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:?}: iters={} time={:.1}s meanGD={:.4} meanRMS={:.4} meanPSNR={:.2} psnrs={:?} median2muL={:.3e}",
            method,
            iters,
            el,
            mean(&gds),
            mean(&rms),
            mean(&psnrs),
            psnrs.iter().map(|p| (p * 10.0).round() / 10.0).collect::<Vec<_>>(),
            median(ratios_all)
        );
    }
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn conv_gap(iters: usize) {
    let hw = env_usize("HW", 12);
    let ch1 = env_usize("CH1", 4);
    let ch2 = env_usize("CH2", 8);
    let b = env_usize("B", 4);
    let classes = env_usize("CLASSES", 4);
    let model = convnet(&[1, hw, hw], (ch1, ch2), classes).unwrap();
    let init = match std::env::var("CWU").ok().and_then(|v| v.parse::<f64>().ok()) {
        Some(r) => InitScheme::WideUniform { low: -r, high: r },
        None => InitScheme::DefaultRandom,
    };
    let params = init_params(&model, &init, 2);
    let kind = match std::env::var("DATA").as_deref() {
        Ok("texture") => SynthKind::Texture,
        Ok("stripes") => SynthKind::Stripes,
        _ => SynthKind::Blobs,
    };
    let data = synth_dataset(kind, 2 * b.max(classes), &[1, hw, hw], classes, 6).unwrap();
    let idx: Vec<usize> = (0..b).collect();
    let batch = data.batch_of(&idx).unwrap();
    let lg = loss_and_param_grads(&model, &params, &batch.images, &batch.labels).unwrap();
    let ghat = lg.grads.flatten();
    println!("params: {}", model.parameter_count());

    for method in [AttackMethod::L2, AttackMethod::FedLeak] {
        let cfg = AttackConfig {
            method,
            iterations: iters,
            seed: 7,
            step_size: env_f64("ETA", 1e-4),
            schedule: if std::env::var("ANNEAL").is_ok() {
                leaklab_core::attack::Schedule::CosineAnnealing { period: iters + 1 }
            } else {
                leaklab_core::attack::Schedule::Constant
            },
            ..AttackConfig::default()
        };
        let t0 = Instant::now();
        let out = run_attack(&model, &params, &ghat, &batch.labels, &cfg, None).unwrap();
        let el = t0.elapsed().as_secs_f64();
        // per-truth best-match PSNR like the evaluation protocol
        let mut psnrs = Vec::new();
        let per = hw * hw;
        for t in 0..b {
            let truth = leaklab_core::Tensor::new(
                vec![1, hw, hw],
                batch.images.data()[t * per..(t + 1) * per].to_vec(),
            )
            .unwrap();
            let mut best = f64::NEG_INFINITY;
            for r in 0..b {
                let rec = leaklab_core::Tensor::new(
                    vec![1, hw, hw],
                    out.final_x.data()[r * per..(r + 1) * per].to_vec(),
                )
                .unwrap();
                best = best.max(psnr(&rec, &truth).unwrap());
            }
            psnrs.push(best);
        }
        let mean: f64 = psnrs.iter().sum::<f64>() / b as f64;
        println!(
            "{:?}: iters={} time={:.1}s ({:.1} ms/it) meanPSNR={:.2} D={:.4}",
            method,
            iters,
            el,
            1000.0 * el / iters as f64,
            mean,
            out.final_distance
        );
    }
}

fn mu_l(iters: usize) {
    let r = env_f64("WU", 0.5);
    let model = mlp(&[1, 28, 28], &[128, 64], 10).unwrap();
    let params = init_params(&model, &InitScheme::WideUniform { low: -r, high: r }, 1);
    let data = synth_dataset(SynthKind::Blobs, 16, &[1, 28, 28], 10, 5).unwrap();
    let batch = data.batch_of(&[3]).unwrap();
    let lg = loss_and_param_grads(&model, &params, &batch.images, &batch.labels).unwrap();
    let ghat = lg.grads.flatten();

    for (name, method, opt) in [
        ("gd-l2", AttackMethod::L2, OptimizerKind::Gd),
        ("fedleak", AttackMethod::FedLeak, OptimizerKind::Gd),
        ("fedleak-adam", AttackMethod::FedLeak, OptimizerKind::Adam),
    ] {
        let cfg = AttackConfig {
            method,
            optimizer: opt,
            iterations: iters,
            seed: 11,
            ..AttackConfig::default()
        };
        let out = run_attack(&model, &params, &ghat, &batch.labels, &cfg, Some(&batch.images))
            .unwrap();
        let ratios: Vec<f64> = out.records.iter().filter_map(|r| r.two_mu_over_l).collect();
        let p = psnr(&out.final_x, &batch.images).unwrap();
        println!("{name}: median 2mu/L = {:.4e}, PSNR={:.2}", median(ratios), p);
    }
}
