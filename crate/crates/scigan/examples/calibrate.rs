use scigan::baselines::{baseline_fit, BaselineConfig, BaselineVariant};
use scigan::gan::{train_scigan, SciganModel, TrainConfig, Variant};
use scigan::metrics::{evaluate_model, factual_mse, ConstantModel, DoseResponse, DEFAULT_GRID_N};
use scigan::random::{rng_from_seed, uniform01};
use scigan::simulate::{make_dataset, synth_features, Dataset, ResponseModel, SimulationConfig};
use scigan::tensor::Tensor2;
use std::time::Instant;

/// MISE of the generator itself (fixed z per test sample), bypassing the
/// inference net: separates "GAN never learned counterfactuals" from
/// "distillation lost them".
fn generator_sqrt_mise(
    truth: &ResponseModel,
    model: &SciganModel,
    dataset: &Dataset,
    noise_dim: usize,
    seed: u64,
) -> f64 {
    let mut rng = rng_from_seed(seed);
    let grid_n = DEFAULT_GRID_N;
    let h = 1.0 / (grid_n - 1) as f64;
    let k = truth.num_treatments();
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in &dataset.split.test {
        let x = dataset.x.row(i);
        let z: Vec<f64> = (0..noise_dim).map(|_| uniform01(&mut rng)).collect();
        for w in 0..k {
            let mut integral = 0.0;
            for j in 0..grid_n {
                let d = j as f64 * h;
                let g = model
                    .generator_label(x, dataset.w_f[i], dataset.d_f[i], dataset.y_f[i], &z, w, d)
                    .unwrap();
                let t = truth.response(w, x, d).unwrap();
                let weight = if j == 0 || j == grid_n - 1 { 0.5 } else { 1.0 };
                integral += weight * h * (g - t) * (g - t);
            }
            total += integral;
            count += 1;
        }
    }
    (total / count as f64).sqrt()
}

/// Square-root of the per-treatment MISE component, to see which treatment
/// heads carry the error.
fn per_treatment_sqrt_mise(
    truth: &ResponseModel,
    model: &dyn DoseResponse,
    test_x: &Tensor2,
) -> Vec<f64> {
    let grid_n = DEFAULT_GRID_N;
    let h = 1.0 / (grid_n - 1) as f64;
    (0..truth.num_treatments())
        .map(|w| {
            let mut total = 0.0;
            for r in 0..test_x.rows() {
                let x = test_x.row(r);
                for j in 0..grid_n {
                    let d = j as f64 * h;
                    let g = model.predict(x, w, d).unwrap();
                    let t = truth.response(w, x, d).unwrap();
                    let weight = if j == 0 || j == grid_n - 1 { 0.5 } else { 1.0 };
                    total += weight * h * (g - t) * (g - t);
                }
            }
            (total / test_x.rows() as f64).sqrt()
        })
        .collect()
}

fn main() {
    let mut rng = rng_from_seed(100);
    let sim = SimulationConfig { num_treatments: 3, ..SimulationConfig::default() };
    let model = ResponseModel::sample(sim, 10, &mut rng).unwrap();
    let features = synth_features(&mut rng, 1000, 10).unwrap();
    let dataset = make_dataset(&features, &model, &mut rng).unwrap();
    let test_x = {
        let idx = &dataset.split.test;
        let mut t = Tensor2::zeros(idx.len(), 10);
        for (r, &i) in idx.iter().enumerate() { t.row_mut(r).copy_from_slice(dataset.x.row(i)); }
        t
    };

    let mut counts = [0usize; 3];
    for &w in &dataset.w_f {
        counts[w] += 1;
    }
    println!("factual treatment counts (all {} samples): {counts:?}", dataset.w_f.len());

    let train_mean = dataset.split.train.iter().map(|&i| dataset.y_f[i]).sum::<f64>()
        / dataset.split.train.len() as f64;
    let constant = ConstantModel { value: train_mean, num_treatments: 3 };
    let rep = evaluate_model(&model, &constant, &test_x, DEFAULT_GRID_N).unwrap();
    let fmse = factual_mse(&constant, &dataset, &dataset.split.test).unwrap();
    println!("constant: sqrt_mise={:.4} factual_test_mse={:.4}", rep.sqrt_mise, fmse);

    let t0 = Instant::now();
    let fit = baseline_fit(&dataset, BaselineVariant::MlpM, &BaselineConfig {
        hidden_units: 48, batch_size: 64, max_iterations: 5000, ..BaselineConfig::default()
    }, 11).unwrap();
    let rep = evaluate_model(&model, &fit.net, &test_x, DEFAULT_GRID_N).unwrap();
    let fmse = factual_mse(&fit.net, &dataset, &dataset.split.test).unwrap();
    println!(
        "mlp_m:    sqrt_mise={:.4} factual_test_mse={:.4} stopped_at={} ({:?})",
        rep.sqrt_mise, fmse, fit.stopped_at, t0.elapsed()
    );
    println!("  mlp_m per-treatment: {:?}", per_treatment_sqrt_mise(&model, &fit.net, &test_x));

    for (gan_it, lambda, noise) in [(2000usize, 50.0f64, 16usize), (2000, 20.0, 16)] {
        let cfg = TrainConfig {
            hidden_units: 64, inv_dim: 16, eqv_dim: 16, noise_dim: noise,
            num_dosage_samples: 5, lambda_supervised: lambda,
            batch_size: 128, gan_iterations: gan_it, inference_iterations: 5000,
            disc_steps: 1,
            variant: Variant::full(), log_every: 500, ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train_scigan(&dataset, &cfg, 21).unwrap();
        let rep = evaluate_model(&model, &out.model, &test_x, DEFAULT_GRID_N).unwrap();
        let fmse = factual_mse(&out.model, &dataset, &dataset.split.test).unwrap();
        let gen_mise = generator_sqrt_mise(&model, &out.model, &dataset, cfg.noise_dim, 77);
        println!(
            "scigan g{gan_it} l{lambda} nz{noise}: \
             sqrt_mise={:.4} gen_sqrt_mise={:.4} factual_test_mse={:.4} ({:?})",
            rep.sqrt_mise, gen_mise, fmse, t0.elapsed()
        );
        println!(
            "  scigan per-treatment: {:?}",
            per_treatment_sqrt_mise(&model, &out.model, &test_x)
        );
        // Copy-circuit probe: shift the y_f input and watch whether the whole
        // curve rides along with it one-for-one.
        let mut rng2 = rng_from_seed(991);
        for &i in dataset.split.test.iter().take(2) {
            let x = dataset.x.row(i);
            let z: Vec<f64> = (0..cfg.noise_dim).map(|_| uniform01(&mut rng2)).collect();
            let at = |y: f64| {
                out.model
                    .generator_label(x, dataset.w_f[i], dataset.d_f[i], y, &z, 0, 0.5)
                    .unwrap()
            };
            let base = at(dataset.y_f[i]);
            let up = at(dataset.y_f[i] + 5.0);
            let down = at(dataset.y_f[i] - 5.0);
            println!(
                "  copy probe sample {i}: G(yf)={base:.2} G(yf+5)={up:.2} G(yf-5)={down:.2} \
                 (slope~{:.2})",
                (up - down) / 10.0
            );
        }
        // Flatness probe: generator dosage-spread vs truth dosage-spread.
        let mut rng2 = rng_from_seed(990);
        for &i in dataset.split.test.iter().take(2) {
            let x = dataset.x.row(i);
            let z: Vec<f64> = (0..cfg.noise_dim).map(|_| uniform01(&mut rng2)).collect();
            for w in 0..3 {
                let curve: Vec<f64> = (0..5)
                    .map(|j| {
                        out.model
                            .generator_label(
                                x, dataset.w_f[i], dataset.d_f[i], dataset.y_f[i], &z, w,
                                j as f64 / 4.0,
                            )
                            .unwrap()
                    })
                    .collect();
                let truth: Vec<f64> =
                    (0..5).map(|j| model.response(w, x, j as f64 / 4.0).unwrap()).collect();
                println!(
                    "  sample {i} w{w} gen=[{}] truth=[{}]",
                    curve.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", "),
                    truth.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(", ")
                );
            }
        }
        let first = out.gan_log.rows.first().unwrap();
        let last = out.gan_log.rows.last().unwrap();
        println!(
            "  gan first: sup={:.4} lw={:.4} ld={:.4} lg={:.4}",
            first.supervised, first.treatment_loss, first.dosage_loss_mean, first.generator_loss
        );
        println!(
            "  gan last:  sup={:.4} lw={:.4} ld={:.4} lg={:.4}",
            last.supervised, last.treatment_loss, last.dosage_loss_mean, last.generator_loss
        );
        let inf_first = out.inference_log.first().unwrap();
        let inf_last = out.inference_log.last().unwrap();
        println!("  inf: first=({}, {:.5}) last=({}, {:.5})", inf_first.0, inf_first.1, inf_last.0, inf_last.1);
    }
}
