fn main() {
    for mode in ["CC", "NC", "CN"] {
        let mut cfg = locnet::scenario::coop(false);
        cfg.mode = locnet::scenario::Mode::parse(mode).unwrap();
        let t0 = std::time::Instant::now();
        let m = locnet::scenario::run_scenario(&cfg).unwrap();
        print!("{mode}: ");
        for n in [10, 50, 100, 150, 200, 250] {
            print!(" n={n}: {:6.2}", m.self_rmse(n));
        }
        println!("   ({:.0?})", t0.elapsed());
    }
}
