fn main() {
    let cfg = locnet::scenario::noncoop(false);
    let m = locnet::scenario::run_scenario(&cfg).unwrap();
    for n in [10, 50, 100, 150, 200, 250, 300] {
        print!("n={n:3}");
        for l in [2u32, 3, 4, 5] {
            print!("  CA{l}: {:6.2}", m.self_rmse_ca(n, locnet::agent::AgentId(l)));
        }
        println!();
    }
}
