use spi_core::config::TrainConfig;
use spi_core::datasets::{generate, DomainShiftSpec};
use spi_core::trainer::Trainer;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0002);
    let gamma: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.8);

    let bundle = generate(&DomainShiftSpec { noise_sigma: noise, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        seed: 0,
        epochs,
        iters_per_epoch: iters,
        lr_peak: lr,
        gamma,
        ..Default::default()
    };
    let mut tr = Trainer::new(cfg, &bundle).unwrap();
    for e in 0..epochs {
        let mut rng = tr.epoch_rng();
        for i in 0..tr.iters_per_epoch() {
            tr.train_iteration(&mut rng, i).unwrap();
        }
        // store accuracy before end-of-epoch injection
        let (mut right, mut total, mut conf_sum, mut pass) = (0, 0, 0.0, 0);
        for (id, p) in tr.store().iter() {
            let truth = bundle.unlabeled.audit().true_label(*id).unwrap();
            if p.argmax() == truth { right += 1; }
            conf_sum += p.max_value();
            if p.max_value() >= 0.8 { pass += 1; }
            total += 1;
        }
        let report = tr.end_of_epoch().unwrap();
        if e % 2 == 0 || e == epochs - 1 {
            println!(
                "epoch {e:>3}: test {:.3} | store acc {:.3} conf {:.3} pass@.8 {:>3}/{total} | T̂ {} fp {}",
                report.test_acc,
                right as f64 / total.max(1) as f64,
                conf_sum / total.max(1) as f64,
                pass,
                report.n_labeled_target,
                report.n_false_positive
            );
        }
    }
}
