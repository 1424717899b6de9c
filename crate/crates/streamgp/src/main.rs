fn main() { std::process::exit(streamgp::cli::main_from_env()); }
