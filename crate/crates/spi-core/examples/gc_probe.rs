fn main() {
    let t0 = std::time::Instant::now();
    let reports = spi_core::gradcheck::run_gradcheck(42, 20).unwrap();
    for r in &reports {
        println!("{}", r.line());
    }
    println!("elapsed: {:?}", t0.elapsed());
}
