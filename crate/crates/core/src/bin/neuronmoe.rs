fn main() { std::process::exit(neuronmoe::cli::main_with_args(std::env::args_os())); }
