use spi_core::config::{LossMask, TrainConfig};
use spi_core::datasets::{generate, DomainShiftSpec};
use spi_core::trainer::run;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(30);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let tx: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let n_source: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(500);
    let seeds: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3);

    let t0 = std::time::Instant::now();
    let bundle = generate(&DomainShiftSpec {
        noise_sigma: noise,
        translation: vec![tx, 0.0],
        n_source,
        ..Default::default()
    })
    .unwrap();
    let mut improvements = Vec::new();
    let mut wins = 0;
    for seed in 0..seeds {
        let spi_cfg = TrainConfig { seed, epochs, iters_per_epoch: iters, ..Default::default() };
        let mut st_cfg = spi_cfg.clone();
        st_cfg.loss_mask = LossMask::parse("cls").unwrap();

        let spi = run(&spi_cfg, &bundle, None).unwrap();
        let st = run(&st_cfg, &bundle, None).unwrap();
        let spi_acc = spi.reports.last().unwrap().test_acc;
        let st_acc = st.reports.last().unwrap().test_acc;
        let last = spi.reports.last().unwrap();
        println!(
            "seed {seed}: SPI {:.4}  S+T {:.4}  diff {:+.4} | T̂ {} fp {}",
            spi_acc, st_acc, spi_acc - st_acc, last.n_labeled_target, last.n_false_positive
        );
        if spi_acc > st_acc { wins += 1; }
        improvements.push(spi_acc - st_acc);
    }
    let mean = improvements.iter().sum::<f64>() / improvements.len() as f64;
    println!("mean improvement {:+.4}, wins {wins}/{seeds}, elapsed {:?}", mean, t0.elapsed());
}
