fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(dream_cli::dispatch(&args));
}
